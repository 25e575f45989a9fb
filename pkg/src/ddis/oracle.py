"""Closed-form Gaussian-mixture diffusion test-bed.

Under the forward noising process every mixture component N(mu, Sigma)
becomes N(sqrt(abar)*mu, abar*Sigma + (1-abar)*I), so scores, class
posteriors, and guided noise predictions are all available in closed form.
These exact quantities drive the sampler and guidance-algebra checks:
-sqrt(1-abar) * score is the optimal noise predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ddim_step, step_sigma
from .tensor import Tensor

MAX_ORACLE_DIM = 8


class MixtureError(ValueError):
    """Invalid mixture specification."""


def _logsumexp(a: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


class MixtureDiffusion:
    """Class-labelled Gaussian mixture diffused by a noise schedule."""

    def __init__(self, means, covs, weights, class_ids, schedule: NoiseSchedule):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.dim = self.means.shape[1]
        if self.dim > MAX_ORACLE_DIM:
            raise MixtureError(f"oracle dimension {self.dim} exceeds {MAX_ORACLE_DIM}")
        k = self.means.shape[0]
        self.covs = np.asarray(covs, dtype=np.float64).reshape(k, self.dim, self.dim)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-12):
            raise MixtureError(f"mixture weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.weights <= 0):
            raise MixtureError("mixture weights must be positive")
        for i, c in enumerate(self.covs):
            if not np.allclose(c, c.T, atol=1e-12):
                raise MixtureError(f"covariance {i} not symmetric")
            np.linalg.cholesky(c)  # raises if not positive-definite
        self.schedule = schedule
        self._cache: dict = {}

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def class_prior(self, y: int) -> float:
        return float(self.weights[self.class_ids == y].sum())

    def _params_at(self, t: int):
        got = self._cache.get(t)
        if got is not None:
            return got
        ab = float(self.schedule.abar(t))
        means = np.sqrt(ab) * self.means
        covs = ab * self.covs + (1.0 - ab) * np.eye(self.dim)
        invs = np.linalg.inv(covs)
        _, logdets = np.linalg.slogdet(covs)
        self._cache[t] = (means, covs, invs, logdets)
        return self._cache[t]

    def _log_weighted_densities(self, x: np.ndarray, t: int) -> np.ndarray:
        """log(w_k N_k(x)) for every component, shape [n, K]."""
        means, _, invs, logdets = self._params_at(t)
        diff = x[:, None, :] - means[None, :, :]  # [n,K,d]
        quad = np.einsum("nkd,kde,nke->nk", diff, invs, diff)
        const = -0.5 * (self.dim * np.log(2 * np.pi) + logdets)
        return np.log(self.weights)[None, :] + const[None, :] + (-0.5 * quad)

    def _component_scores(self, x: np.ndarray, t: int) -> np.ndarray:
        """Per-component Gaussian scores C_k^{-1}(m_k - x), shape [n,K,d]."""
        means, _, invs, _ = self._params_at(t)
        diff = means[None, :, :] - x[:, None, :]
        return np.einsum("kde,nke->nkd", invs, diff)

    # ------------------------------------------------------------------
    # exact quantities
    # ------------------------------------------------------------------

    def log_marginal(self, x, t: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return _logsumexp(self._log_weighted_densities(x, t), axis=1)

    def marginal_score(self, x, t: int) -> np.ndarray:
        """Gradient of the log diffused-mixture density at x."""
        x1 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logw = self._log_weighted_densities(x1, t)
        resp = np.exp(logw - _logsumexp(logw, axis=1, keepdims=True))
        score = np.einsum("nk,nkd->nd", resp, self._component_scores(x1, t))
        return score[0] if np.asarray(x).ndim == 1 else score

    def log_class_likelihood(self, x, t: int, y: int) -> np.ndarray:
        """log p(x | class y) at time t."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = self.class_ids == y
        if not mask.any():
            raise MixtureError(f"unknown class {y}")
        logw = self._log_weighted_densities(x, t)[:, mask]
        return _logsumexp(logw, axis=1) - np.log(self.class_prior(y))

    def conditional_score(self, x, t: int, y: int) -> np.ndarray:
        x1 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = self.class_ids == y
        if not mask.any():
            raise MixtureError(f"unknown class {y}")
        logw = self._log_weighted_densities(x1, t)[:, mask]
        resp = np.exp(logw - _logsumexp(logw, axis=1, keepdims=True))
        score = np.einsum("nk,nkd->nd", resp, self._component_scores(x1, t)[:, mask])
        return score[0] if np.asarray(x).ndim == 1 else score

    def class_posterior(self, x, t: int, y: int) -> np.ndarray:
        """Exact Bayes posterior p(y | x) under the diffused mixture."""
        x1 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = self.class_ids == y
        if not mask.any():
            raise MixtureError(f"unknown class {y}")
        logw = self._log_weighted_densities(x1, t)
        post = np.exp(_logsumexp(logw[:, mask], axis=1) - _logsumexp(logw, axis=1))
        return post[0] if np.asarray(x).ndim == 1 else post

    def grad_log_posterior(self, x, t: int, y: int) -> np.ndarray:
        """Gradient of log p(y|x): within-class mean score minus marginal mean score."""
        x1 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = self.class_ids == y
        if not mask.any():
            raise MixtureError(f"unknown class {y}")
        logw = self._log_weighted_densities(x1, t)
        comp = self._component_scores(x1, t)
        resp_all = np.exp(logw - _logsumexp(logw, axis=1, keepdims=True))
        logw_y = logw[:, mask]
        resp_y = np.exp(logw_y - _logsumexp(logw_y, axis=1, keepdims=True))
        grad = np.einsum("nk,nkd->nd", resp_y, comp[:, mask]) - np.einsum("nk,nkd->nd", resp_all, comp)
        return grad[0] if np.asarray(x).ndim == 1 else grad

    # ------------------------------------------------------------------
    # noise predictors
    # ------------------------------------------------------------------

    def noise_scale(self, t: int) -> float:
        return float(np.sqrt(1.0 - float(self.schedule.abar(t))))

    def eps_marginal(self, x, t: int) -> np.ndarray:
        return -self.noise_scale(t) * self.marginal_score(x, t)

    def eps_conditional(self, x, t: int, y: int) -> np.ndarray:
        return -self.noise_scale(t) * self.conditional_score(x, t, y)

    def cg_epsilon(self, x, t: int, y: int, s: float) -> np.ndarray:
        """Classifier guidance: conditional noise minus scaled posterior gradient."""
        if s < 0:
            raise MixtureError(f"guidance scale must be >= 0, got {s}")
        return self.eps_conditional(x, t, y) - s * self.noise_scale(t) * self.grad_log_posterior(x, t, y)

    def cfg_epsilon_exact(self, x, t: int, y: int, s: float) -> np.ndarray:
        """Exact classifier-free form: eps_marginal + s*(eps_cond - eps_marginal)."""
        e0 = self.eps_marginal(x, t)
        return e0 + s * (self.eps_conditional(x, t, y) - e0)

    # ------------------------------------------------------------------
    # analytic clean-data moments
    # ------------------------------------------------------------------

    def target_moments(self, y: int | None = None) -> tuple:
        if y is None:
            w, mu, cov = self.weights, self.means, self.covs
        else:
            mask = self.class_ids == y
            w = self.weights[mask] / self.class_prior(y)
            mu, cov = self.means[mask], self.covs[mask]
        mean = np.einsum("k,kd->d", w, mu)
        second = np.einsum("k,kde->de", w, cov + np.einsum("kd,ke->kde", mu, mu))
        return mean, second - np.outer(mean, mean)


@dataclass
class MomentReport:
    n: int
    mode: str
    sample_mean: np.ndarray
    sample_cov: np.ndarray
    target_mean: np.ndarray
    target_cov: np.ndarray
    mean_band: np.ndarray
    cov_band: np.ndarray
    class_mass: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_ok(self) -> bool:
        return bool(np.all(np.abs(self.sample_mean - self.target_mean) <= self.mean_band))

    @property
    def cov_ok(self) -> bool:
        return bool(np.all(np.abs(self.sample_cov - self.target_cov) <= self.cov_band))

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.cov_ok

    @property
    def moment_error(self) -> float:
        return float(
            np.linalg.norm(self.sample_mean - self.target_mean)
            + np.linalg.norm(self.sample_cov - self.target_cov)
        )

    def write_csv(self, path) -> None:
        d = len(self.sample_mean)
        lines = ["quantity,index,sample,target,band"]
        for i in range(d):
            lines.append(
                f"mean,{i},{self.sample_mean[i]:.10g},{self.target_mean[i]:.10g},{self.mean_band[i]:.10g}"
            )
        for i in range(d):
            for j in range(d):
                lines.append(
                    f"cov,{i}-{j},{self.sample_cov[i, j]:.10g},"
                    f"{self.target_cov[i, j]:.10g},{self.cov_band[i, j]:.10g}"
                )
        lines.append(f"passed,,{int(self.passed)},1,0")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def oracle_ddim_samples(mixture: MixtureDiffusion, n: int, seed: int, y: int | None = None, guidance=None) -> np.ndarray:
    """Run the reverse sampler with exact noise predictions; returns [n, d]."""
    schedule = mixture.schedule
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, mixture.dim))
    for i in reversed(range(schedule.t_sample)):
        t = int(schedule.taus[i])
        t_prev = int(schedule.prev_taus[i])
        if guidance is not None:
            eps = guidance(z, t)
        elif y is None:
            eps = mixture.eps_marginal(z, t)
        else:
            eps = mixture.eps_conditional(z, t, y)
        sigma = step_sigma(schedule, t, t_prev)
        noise = Tensor(rng.standard_normal(z.shape)) if sigma > 0 else None
        z = ddim_step(Tensor(z), Tensor(eps), t, t_prev, schedule, noise=noise).data
    return z


def oracle_sample_check(mixture: MixtureDiffusion, n: int = 10000, seed: int = 0, y: int | None = None) -> MomentReport:
    """Sampler moment check: 3-sigma Monte-Carlo bands around analytic targets.

    The band for each statistic is 3 * (sample std of its estimator) / sqrt(n).
    """
    samples = oracle_ddim_samples(mixture, n, seed, y=y)
    target_mean, target_cov = mixture.target_moments(y)
    sample_mean = samples.mean(axis=0)
    centered = samples - sample_mean
    sample_cov = centered.T @ centered / (n - 1)
    mean_band = 3.0 * samples.std(axis=0, ddof=1) / np.sqrt(n)
    # Gaussian-theory standard error of covariance entries:
    # se(C_ij)^2 = (C_ii C_jj + C_ij^2) / n
    diag = np.diag(sample_cov)
    cov_band = 3.0 * np.sqrt((np.outer(diag, diag) + sample_cov**2) / n)
    class_mass = None
    if y is not None:
        class_mass = float(np.mean(mixture.class_posterior(samples, 0, y)))
    return MomentReport(
        n=n,
        mode=schedule_mode(mixture.schedule),
        sample_mean=sample_mean,
        sample_cov=sample_cov,
        target_mean=target_mean,
        target_cov=target_cov,
        mean_band=mean_band,
        cov_band=cov_band,
        class_mass=class_mass,
    )


def schedule_mode(schedule: NoiseSchedule) -> str:
    return f"{schedule.sigma_mode}-T{schedule.t_sample}"


def two_class_line_mixture(schedule: NoiseSchedule, dim: int = 2, separation: float = 2.0, spread: float = 0.2) -> MixtureDiffusion:
    """Canonical two-class fixture: symmetric Gaussians along the first axis."""
    mu = np.zeros((2, dim))
    mu[0, 0] = -separation / 2
    mu[1, 0] = separation / 2
    covs = np.stack([np.eye(dim) * spread**2] * 2)
    return MixtureDiffusion(mu, covs, [0.5, 0.5], [0, 1], schedule)


def two_class_cluster_mixture(
    schedule: NoiseSchedule,
    dim: int = 3,
    separation: float = 4.0,
    sub_offset: float = 1.25,
    spread: float = 0.05,
) -> MixtureDiffusion:
    """Two classes of two sub-clusters each, structured along every coordinate.

    The between-cluster geometry carries the covariance in all coordinates, so
    sampler moment checks are sensitive to coefficient errors while staying
    above the coarse-step discretization floor.
    """
    signs = np.array([(-1.0) ** i for i in range(dim)])
    centers = np.stack([-np.full(dim, separation / 2), np.full(dim, separation / 2)])
    mu = np.stack(
        [
            centers[0] - sub_offset * signs,
            centers[0] + sub_offset * signs,
            centers[1] - sub_offset * signs,
            centers[1] + sub_offset * signs,
        ]
    )
    covs = np.stack([np.eye(dim) * spread**2] * 4)
    return MixtureDiffusion(mu, covs, [0.25] * 4, [0, 0, 1, 1], schedule)
