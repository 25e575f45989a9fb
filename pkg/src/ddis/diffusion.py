"""Noise schedule, DDIM reverse stepping, and classifier-free guidance.

Cumulative signal levels use the exclusive-product convention: abar[0] == 1
(clean data), abar[t] = prod of the first t per-step alphas, so the final
reverse step (to t=0) lands exactly on the predicted clean sample and the
forward/reverse identity is satisfiable to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor

SIGMA_MODES = ("deterministic", "ddpm-matched")


class ScheduleError(ValueError):
    """Invalid noise-schedule construction parameters."""


@dataclass
class NoiseSchedule:
    """Signal/noise tables for forward noising and the reverse sub-sequence."""

    t_train: int
    betas: np.ndarray          # [t_train]
    alpha_bars: np.ndarray     # [t_train + 1], exclusive cumulative product
    taus: np.ndarray           # strictly increasing sampling timesteps
    prev_taus: np.ndarray      # step targets, aligned with taus
    sigmas: np.ndarray         # per sampling step
    sigma_mode: str
    cfg_scale: float
    x0_clip: tuple | None = None  # clip predicted clean data into this range

    @property
    def t_sample(self) -> int:
        return len(self.taus)

    def abar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.t_train):
            raise ScheduleError(f"timestep {t} outside [0, {self.t_train}]")
        return self.alpha_bars[t]

    def meta_dict(self) -> dict:
        return {
            "t_train": self.t_train,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "t_sample": int(self.t_sample),
            "sigma_mode": self.sigma_mode,
            "cfg_scale": self.cfg_scale,
            "x0_clip": list(self.x0_clip) if self.x0_clip else None,
        }


def make_schedule(
    t_train: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    t_sample: int = 30,
    sigma_mode: str = "deterministic",
    cfg_scale: float = 15.0,
    x0_clip: tuple | None = None,
) -> NoiseSchedule:
    """Linear-beta schedule with a uniform-stride sampling sub-sequence."""
    if t_train < 1:
        raise ScheduleError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if not (1 <= t_sample <= t_train):
        raise ScheduleError(f"t_sample must lie in [1, t_train], got {t_sample}")
    if sigma_mode not in SIGMA_MODES:
        raise ScheduleError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")
    if cfg_scale < 0:
        raise ScheduleError(f"cfg_scale must be >= 0, got {cfg_scale}")

    betas = np.linspace(beta_start, beta_end, t_train)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    taus = np.round(np.arange(1, t_sample + 1) * (t_train / t_sample)).astype(np.int64) - 1
    if np.any(np.diff(taus) <= 0) or taus[0] < 0 or taus[-1] >= t_train:
        raise ScheduleError(f"degenerate sampling sub-sequence for t_sample={t_sample}")
    prev_taus = np.concatenate([[0], taus[:-1]])

    sigmas = np.zeros(t_sample)
    if sigma_mode == "ddpm-matched":
        ab_t = alpha_bars[taus]
        ab_p = alpha_bars[prev_taus]
        with np.errstate(divide="ignore", invalid="ignore"):
            s2 = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
        sigmas = np.sqrt(np.where((1.0 - ab_t) > 0, np.maximum(s2, 0.0), 0.0))

    return NoiseSchedule(
        t_train=t_train,
        betas=betas,
        alpha_bars=alpha_bars,
        taus=taus,
        prev_taus=prev_taus,
        sigmas=sigmas,
        sigma_mode=sigma_mode,
        cfg_scale=float(cfg_scale),
        x0_clip=tuple(x0_clip) if x0_clip is not None else None,
    )


# ---------------------------------------------------------------------------
# forward / reverse primitives
# ---------------------------------------------------------------------------


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Noise clean data to timestep t: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    x0, eps = T.as_tensor(x0), T.as_tensor(eps)
    if x0.shape != eps.shape:
        raise T.ShapeError(f"q_sample: x0 {x0.shape} and eps {eps.shape} differ")
    ab = schedule.abar(t)
    if np.ndim(ab) > 0:  # per-sample timesteps
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
        return T.add(T.mul(x0, Tensor(np.sqrt(ab))), T.mul(eps, Tensor(np.sqrt(1.0 - ab))))
    return T.add(T.mul(x0, float(np.sqrt(ab))), T.mul(eps, float(np.sqrt(1.0 - ab))))


def predict_x0(z_t, eps_hat, t: int, schedule: NoiseSchedule) -> Tensor:
    """Invert the forward map at t given predicted noise.

    When the schedule carries a clean-data range, the prediction is clipped
    into it; this bounds reverse trajectories against compounding prediction
    error and is exact for in-range data.
    """
    ab = float(schedule.abar(t))
    z_t, eps_hat = T.as_tensor(z_t), T.as_tensor(eps_hat)
    x0 = T.mul(T.sub(z_t, T.mul(eps_hat, float(np.sqrt(1.0 - ab)))), 1.0 / float(np.sqrt(ab)))
    if schedule.x0_clip is not None:
        x0 = T.clip(x0, schedule.x0_clip[0], schedule.x0_clip[1])
    return x0


def mu_from_eps(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> Tensor:
    """Deterministic reverse-step mean from predicted noise (cumulative-signal form)."""
    if t < 1:
        raise ScheduleError("mu_from_eps: t=0 has no predecessor")
    x_t, eps_hat = T.as_tensor(x_t), T.as_tensor(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise T.ShapeError(f"mu_from_eps: x_t {x_t.shape} and eps {eps_hat.shape} differ")
    ab_prev = float(schedule.abar(t - 1))
    x0 = predict_x0(x_t, eps_hat, t, schedule)
    return T.add(T.mul(x0, float(np.sqrt(ab_prev))), T.mul(eps_hat, float(np.sqrt(1.0 - ab_prev))))


def cfg_epsilon(model, z_t, t, cond, s: float) -> Tensor:
    """Classifier-free guided noise: eps_null + s*(eps_cond - eps_null).

    Exactly two denoiser evaluations; s=0 returns the unconditional branch and
    s=1 the conditional one.
    """
    if s < 0:
        raise ValueError(f"cfg scale must be >= 0, got {s}")
    z_t = T.as_tensor(z_t)
    eps_null = model.forward(z_t, t, None)
    eps_cond = model.forward(z_t, t, cond)
    return T.add(eps_null, T.mul(T.sub(eps_cond, eps_null), float(s)))


def step_sigma(schedule: NoiseSchedule, t: int, t_prev: int) -> float:
    """Per-step stochasticity for the (t, t_prev) pair under the schedule's mode."""
    if schedule.sigma_mode == "deterministic":
        return 0.0
    ab_t = float(schedule.abar(t))
    ab_prev = float(schedule.abar(t_prev))
    if 1.0 - ab_t <= 0.0:
        return 0.0
    s2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    return float(np.sqrt(max(s2, 0.0)))


def ddim_step(z_t, eps_tilde, t: int, t_prev: int, schedule: NoiseSchedule, noise=None) -> Tensor:
    """One reverse update from t to t_prev using the predicted-x0 form."""
    z_t, eps_tilde = T.as_tensor(z_t), T.as_tensor(eps_tilde)
    if z_t.shape != eps_tilde.shape:
        raise T.ShapeError(f"ddim_step: z {z_t.shape} and eps {eps_tilde.shape} differ")
    if t_prev > t:
        raise ScheduleError(f"ddim_step: t_prev={t_prev} is after t={t}")
    ab_prev = float(schedule.abar(t_prev))
    sigma = step_sigma(schedule, t, t_prev)
    direction_sq = 1.0 - ab_prev - sigma * sigma
    if direction_sq < -1e-12:
        raise ScheduleError(f"ddim_step: sigma {sigma} too large at t_prev={t_prev}")
    direction = float(np.sqrt(max(direction_sq, 0.0)))
    x0 = predict_x0(z_t, eps_tilde, t, schedule)
    out = T.add(T.mul(x0, float(np.sqrt(ab_prev))), T.mul(eps_tilde, direction))
    if sigma > 0.0:
        if noise is None:
            raise ValueError("ddim_step: stochastic step requires a noise tensor")
        out = T.add(out, T.mul(T.as_tensor(noise), sigma))
    return out


# ---------------------------------------------------------------------------
# sampling loop with trace
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    index: int
    t: int
    z_before: np.ndarray
    z_corrected: np.ndarray
    eps_tilde: np.ndarray
    l_bn: float | None = None
    layer_means: list | None = None
    layer_vars: list | None = None


@dataclass
class SampleTrace:
    seed: int
    steps: list = field(default_factory=list)
    final_latent: np.ndarray | None = None
    final_image: np.ndarray | None = None

    def l_bn_series(self) -> list:
        return [(rec.t, rec.l_bn) for rec in self.steps]

    def write_csv(self, path) -> None:
        n_layers = 0
        for rec in self.steps:
            if rec.layer_means is not None:
                n_layers = len(rec.layer_means)
                break
        header = ["step", "t", "l_bn"]
        for i in range(n_layers):
            header += [f"layer{i}_mean", f"layer{i}_var"]
        lines = [",".join(header)]
        for rec in self.steps:
            row = [str(rec.index), str(rec.t), "" if rec.l_bn is None else f"{rec.l_bn:.12g}"]
            if n_layers:
                if rec.layer_means is None:
                    row += [""] * (2 * n_layers)
                else:
                    for m, v in zip(rec.layer_means, rec.layer_vars):
                        row += [f"{m:.12g}", f"{v:.12g}"]
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def initial_latent(schedule: NoiseSchedule, codec, batch: int, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, *codec.latent_shape()))
    return z, rng


def sample(model, codec, schedule: NoiseSchedule, cond, seed: int, batch: int = 1, hook=None, keep_arrays: bool = True):
    """Reverse-sample from seeded Gaussian noise; returns (image tensor, trace).

    ``hook(z, t) -> (z_corrected, l_bn, layer_means, layer_vars)`` runs before
    the noise prediction of each step; plain sampling passes none.
    """
    z, rng = initial_latent(schedule, codec, batch, seed)
    trace = SampleTrace(seed=seed)
    s = schedule.cfg_scale
    for i in reversed(range(schedule.t_sample)):
        t = int(schedule.taus[i])
        t_prev = int(schedule.prev_taus[i])
        sigma = float(schedule.sigmas[i])
        if hook is not None:
            z_corr, l_bn, layer_means, layer_vars = hook(z, t)
        else:
            z_corr, l_bn, layer_means, layer_vars = z, None, None, None
        eps = cfg_epsilon(model, Tensor(z_corr), t, cond, s).data
        noise = rng.standard_normal(z.shape) if sigma > 0 else None
        z_next = ddim_step(Tensor(z_corr), Tensor(eps), t, t_prev, schedule, noise=None if noise is None else Tensor(noise)).data
        if not np.all(np.isfinite(z_next)):
            raise NumericError(f"non-finite latent at sampling step {i} (t={t})")
        trace.steps.append(
            StepRecord(
                index=i,
                t=t,
                z_before=z.copy() if keep_arrays else np.empty(0),
                z_corrected=z_corr.copy() if keep_arrays else np.empty(0),
                eps_tilde=eps.copy() if keep_arrays else np.empty(0),
                l_bn=l_bn,
                layer_means=layer_means,
                layer_vars=layer_vars,
            )
        )
        z = z_next
    trace.final_latent = z.copy()
    image = codec.decode(Tensor(z))
    trace.final_image = image.data.copy()
    return image, trace
