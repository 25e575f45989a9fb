"""Domain alignment guidance: per-step latent corrections toward BN statistics.

Each sampling step decodes the current latent, measures the classifier's
per-layer batch feature statistics, and nudges the latent down the gradient
of their distance to the frozen running statistics before the noise
prediction and the reverse update run on the corrected latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion, tensor as T
from .nets import ClassifierModel, FeatureStatistics
from .tensor import Graph, NumericError, ShapeError, Tensor


@dataclass
class DagConfig:
    """Guidance strength split into gradient-flow scale and guidance scale."""

    lambda_bn: float = 0.01
    s_g: float = 20.0
    apply_range: tuple | None = None  # inclusive (t_lo, t_hi); None applies at every step
    batch: int = 20
    cfg_scale: float | None = None  # None: use the schedule's scale
    squared_norms: bool = False  # ablation: squared L2 terms instead of plain norms

    def __post_init__(self):
        if self.lambda_bn < 0 or self.s_g < 0:
            raise ValueError(f"guidance scales must be >= 0, got lambda_bn={self.lambda_bn}, s_g={self.s_g}")

    @property
    def eta(self) -> float:
        return self.lambda_bn * self.s_g

    def applies_at(self, t: int) -> bool:
        if self.apply_range is None:
            return True
        lo, hi = self.apply_range
        return lo <= t <= hi


def bn_alignment_loss(batch_stats: FeatureStatistics, running_stats: FeatureStatistics, squared: bool = False) -> Tensor:
    """Sum over layers of L2 distances between batch and running BN statistics.

    Per layer: ||mu_batch - mu_run||_2 + ||var_batch - var_run||_2 (unsquared
    norms by default; the squared variant exists as an ablation).
    """
    if not batch_stats.structure_matches(running_stats):
        raise ShapeError(
            f"feature statistics structure mismatch: {batch_stats.channel_widths()} "
            f"vs {running_stats.channel_widths()}"
        )
    total = None
    for mb, vb, mr, vr in zip(batch_stats.means, batch_stats.variances, running_stats.means, running_stats.variances):
        dmu = T.sub(T.as_tensor(mb), T.as_tensor(mr))
        dvar = T.sub(T.as_tensor(vb), T.as_tensor(vr))
        if squared:
            term = T.add(T.tsum(T.mul(dmu, dmu)), T.tsum(T.mul(dvar, dvar)))
        else:
            term = T.add(T.l2norm(dmu), T.l2norm(dvar))
        total = term if total is None else T.add(total, term)
    return total


def smooth_clamp(x: Tensor) -> Tensor:
    """tanh squash into (-1, 1); keeps intermediate decodes in the classifier's range."""
    return T.ttanh(x)


def _stats_summary(stats: FeatureStatistics) -> tuple:
    means = [float(np.mean(np.asarray(m.data if isinstance(m, Tensor) else m))) for m in stats.means]
    variances = [float(np.mean(np.asarray(v.data if isinstance(v, Tensor) else v))) for v in stats.variances]
    return means, variances


def dag_correct(z_t, classifier: ClassifierModel, codec, running_stats: FeatureStatistics, config: DagConfig):
    """One latent correction: z - eta * grad of the BN alignment loss.

    Returns (corrected latent, loss value, per-layer mean/variance summary).
    Classifier and codec weights are read-only; the correction is a pure
    function of (latent, weights, statistics, eta).
    """
    z_np = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t)
    if not np.all(np.isfinite(z_np)):
        raise NumericError("dag_correct: non-finite latent input")
    eta = config.eta
    if eta == 0.0:
        decoded = smooth_clamp(codec.decode(Tensor(z_np)))
        _, stats = classifier.forward(decoded, capture=True)
        loss = bn_alignment_loss(stats, running_stats, squared=config.squared_norms)
        means, variances = _stats_summary(stats)
        return z_np, float(loss.item()), means, variances

    leaf = Tensor(z_np.copy(), requires_grad=True)
    with Graph() as g:
        decoded = smooth_clamp(codec.decode(leaf))
        _, stats = classifier.forward(decoded, capture=True)
        loss = bn_alignment_loss(stats, running_stats, squared=config.squared_norms)
        g.backward(loss)
    grad = leaf.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise NumericError("dag_correct: non-finite alignment gradient")
    means, variances = _stats_summary(stats)
    return z_np - eta * grad, float(loss.item()), means, variances


def guided_sample(
    denoiser,
    codec,
    classifier: ClassifierModel,
    schedule: diffusion.NoiseSchedule,
    cond,
    config: DagConfig,
    seed: int,
    batch: int | None = None,
):
    """Guided reverse sampling: correct, predict, advance at every step.

    With eta == 0 the trajectory is bit-identical to plain sampling from the
    same seed (the correction short-circuits and records only loss values).
    """
    running = classifier.running_statistics()
    batch = config.batch if batch is None else batch

    def hook(z, t):
        if not config.applies_at(t):
            return z, None, None, None
        return dag_correct(z, classifier, codec, running, config)

    cfg_schedule = schedule
    if config.cfg_scale is not None and config.cfg_scale != schedule.cfg_scale:
        import dataclasses

        cfg_schedule = dataclasses.replace(schedule, cfg_scale=float(config.cfg_scale))
    return diffusion.sample(denoiser, codec, cfg_schedule, cond, seed, batch=batch, hook=hook)


def final_alignment_loss(images, classifier: ClassifierModel, running_stats=None, squared: bool = False) -> float:
    """BN alignment loss of a decoded batch against running statistics."""
    if running_stats is None:
        running_stats = classifier.running_statistics()
    clamped = smooth_clamp(T.as_tensor(images))
    _, stats = classifier.forward(clamped, capture=True)
    return float(bn_alignment_loss(stats, running_stats, squared=squared).item())


def sweep_dag(
    denoiser,
    codec,
    classifier: ClassifierModel,
    schedule: diffusion.NoiseSchedule,
    cond,
    lambda_grid,
    s_g_grid,
    seed: int = 0,
    batch: int = 8,
) -> list:
    """Grid over (lambda_bn, s_g); one metrics row per cell, all finite or flagged."""
    rows = []
    for lam in lambda_grid:
        for s_g in s_g_grid:
            config = DagConfig(lambda_bn=float(lam), s_g=float(s_g), batch=batch)
            image, trace = guided_sample(denoiser, codec, classifier, schedule, cond, config, seed, batch=batch)
            final_lbn = final_alignment_loss(image.data, classifier)
            logits = classifier.forward(Tensor(image.data))
            probs = T.softmax(logits, axis=1).data
            rows.append(
                {
                    "lambda_bn": float(lam),
                    "s_g": float(s_g),
                    "eta": config.eta,
                    "final_l_bn": final_lbn,
                    "mean_max_confidence": float(probs.max(axis=1).mean()),
                    "finite": bool(np.all(np.isfinite(image.data)) and np.isfinite(final_lbn)),
                }
            )
    return rows
