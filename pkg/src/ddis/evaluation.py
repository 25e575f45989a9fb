"""Metrics and experiment harnesses: feature-statistic distance, confidence
reports, direct pixel-space inversion baseline, BN-stability-over-timesteps
study, and data-free knowledge distillation.

The paper-scale Inception metrics are out of scope; their stand-in is the
Fréchet distance between Gaussian fits of the frozen classifier's penultimate
features, which preserves the "distance between feature distributions"
semantics at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, tensor as T
from .guidance import bn_alignment_loss, dag_correct, smooth_clamp
from .nets import ClassifierConfig, ClassifierModel
from .optim import Adam, adam_update
from .tensor import Graph, NumericError, Tensor

SHRINKAGE = 1e-6


@dataclass
class MetricReport:
    per_class_confidence: dict
    top1_agreement: float
    feature_distance: float
    l_bn: float
    shrinkage_applied: bool = False

    def finite(self) -> bool:
        vals = [self.top1_agreement, self.feature_distance, self.l_bn, *self.per_class_confidence.values()]
        return bool(np.all(np.isfinite(vals)))

    def rows(self) -> list:
        rows = [
            ("top1_agreement", self.top1_agreement),
            ("feature_distance", self.feature_distance),
            ("l_bn", self.l_bn),
            ("shrinkage_applied", int(self.shrinkage_applied)),
        ]
        for c in sorted(self.per_class_confidence):
            rows.append((f"confidence_class{c}", self.per_class_confidence[c]))
        return rows


@dataclass
class KdResult:
    teacher_id: str
    student_id: str
    source: str  # real | ddis | baseline-di | unguided-diffusion
    student_accuracy: float

    def __post_init__(self):
        if not (0.0 <= self.student_accuracy <= 1.0):
            raise ValueError(f"accuracy must lie in [0,1], got {self.student_accuracy}")


def gaussian_fit(features: np.ndarray) -> tuple:
    mean = features.mean(axis=0)
    centered = features - mean
    denom = max(len(features) - 1, 1)
    cov = centered.T @ centered / denom
    return mean, cov


def frechet_distance(mean_a, cov_a, mean_b, cov_b) -> tuple:
    """Fréchet distance between Gaussian fits; PSD-safe via symmetric eigs.

    Returns (distance, shrinkage_flag); degenerate covariances get a diagonal
    shrinkage before the matrix square roots.
    """
    shrunk = False
    dim = len(mean_a)
    for cov in (cov_a, cov_b):
        if np.linalg.matrix_rank(cov, tol=1e-10) < dim:
            shrunk = True
    if shrunk:
        cov_a = cov_a + SHRINKAGE * np.eye(dim)
        cov_b = cov_b + SHRINKAGE * np.eye(dim)

    def sym_sqrt(mat):
        vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T

    sa = sym_sqrt(cov_a)
    cross = sym_sqrt(sa @ cov_b @ sa)
    diff = mean_a - mean_b
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(d2, 0.0))), shrunk


def feature_statistic_distance(classifier: ClassifierModel, images_a, images_b) -> tuple:
    fa = classifier.features(Tensor(np.asarray(images_a))).data
    fb = classifier.features(Tensor(np.asarray(images_b))).data
    return frechet_distance(*gaussian_fit(fa), *gaussian_fit(fb))


def metric_report(images, labels, classifier: ClassifierModel, reference_images) -> MetricReport:
    """Deterministic evaluation of a labelled synthetic set against real references."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    logits = classifier.forward(Tensor(images)).data
    probs = T.softmax(Tensor(logits), axis=1).data
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-12):
        raise NumericError("softmax normalization failed in metric report")
    per_class = {}
    for c in np.unique(labels):
        mask = labels == c
        per_class[int(c)] = float(np.mean(probs[mask, int(c)]))
    top1 = float(np.mean(np.argmax(logits, axis=1) == labels))
    distance, shrunk = feature_statistic_distance(classifier, images, reference_images)
    running = classifier.running_statistics()
    _, stats = classifier.forward(Tensor(images), capture=True)
    l_bn = float(bn_alignment_loss(stats, running).item())
    return MetricReport(
        per_class_confidence=per_class,
        top1_agreement=top1,
        feature_distance=distance,
        l_bn=l_bn,
        shrinkage_applied=shrunk,
    )


# ---------------------------------------------------------------------------
# direct-inversion baseline (pixel-space optimization against the classifier)
# ---------------------------------------------------------------------------


def baseline_deep_inversion(
    classifier: ClassifierModel,
    class_id: int,
    iterations: int,
    lambda_bn: float,
    seed: int,
    batch: int = 16,
    lr: float = 0.05,
) -> np.ndarray:
    """Optimize pixels from noise: cross-entropy plus weighted BN alignment.

    Shares the alignment-loss implementation with the sampling guidance; with
    iterations == 0 the noise initialization is returned unchanged.
    """
    from .cat import cross_entropy

    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    rng = np.random.default_rng(seed)
    shape = (batch, classifier.config.in_channels, classifier.config.image_size, classifier.config.image_size)
    pixels = Tensor(rng.standard_normal(shape) * 0.2, requires_grad=True)
    if iterations == 0:
        return pixels.data.copy()
    running = classifier.running_statistics()
    m = np.zeros_like(pixels.data)
    v = np.zeros_like(pixels.data)
    step = 0
    for _ in range(iterations):
        pixels.zero_grad()
        with Graph() as g:
            squashed = smooth_clamp(pixels)
            if lambda_bn != 0.0:
                logits, stats = classifier.forward(squashed, capture=True)
                loss = T.add(
                    cross_entropy(logits, class_id),
                    T.mul(bn_alignment_loss(stats, running), float(lambda_bn)),
                )
            else:
                logits = classifier.forward(squashed)
                loss = cross_entropy(logits, class_id)
            g.backward(loss)
        if not np.isfinite(loss.item()):
            raise NumericError("pixel-space inversion diverged")
        new_data, m, v, step = adam_update(pixels.data, pixels.grad, m, v, step, lr=lr)
        pixels = Tensor(new_data, requires_grad=True)
    return np.tanh(pixels.data)


# ---------------------------------------------------------------------------
# BN statistics across timesteps
# ---------------------------------------------------------------------------


def bn_stability_study(denoiser, codec, classifier: ClassifierModel, schedule, cond, n: int, seed: int) -> dict:
    """Track layer-wise decoded-image statistics at every sampling step.

    Returns {"rows": per-step [t, mean_l..., var_l...], "cov": per-layer
    coefficient of variation of the layer means across timesteps}.
    """
    if n < 8:
        raise ValueError("study needs n >= 8 trajectories")
    running = classifier.running_statistics()
    rows = []

    def hook(z, t):
        decoded = smooth_clamp(codec.decode(Tensor(z)))
        _, stats = classifier.forward(decoded, capture=True)
        means = [float(np.mean(m.data)) for m in stats.means]
        variances = [float(np.mean(v.data)) for v in stats.variances]
        l_bn = float(bn_alignment_loss(stats, running).item())
        rows.append([t] + means + variances)
        return z, l_bn, means, variances

    diffusion.sample(denoiser, codec, schedule, cond, seed, batch=n, hook=hook, keep_arrays=False)
    table = np.array([r[1:] for r in rows])
    n_layers = classifier.n_bn_layers
    cov = []
    for layer in range(n_layers):
        series = table[:, layer]
        denom = abs(float(np.mean(series))) + 1e-12
        cov.append(float(np.std(series) / denom))
    return {"rows": rows, "n_layers": n_layers, "coefficient_of_variation": cov}


def write_bn_stability_csv(path, study: dict) -> None:
    from .artifacts import write_csv

    n_layers = study["n_layers"]
    header = ["t"] + [f"layer{i}_mean" for i in range(n_layers)] + [f"layer{i}_var" for i in range(n_layers)]
    write_csv(path, header, study["rows"])


# ---------------------------------------------------------------------------
# data-free knowledge distillation
# ---------------------------------------------------------------------------


def student_config(image_size: int = 16, n_classes: int = 7) -> ClassifierConfig:
    return ClassifierConfig(image_size=image_size, channels=(8, 16), n_classes=n_classes)


def dfkd_train_student(
    teacher: ClassifierModel,
    student_cfg: ClassifierConfig,
    images: np.ndarray,
    temperature: float,
    epochs: int,
    eval_images: np.ndarray,
    eval_labels: np.ndarray,
    source: str,
    seed: int = 0,
    lr: float = 2e-3,
    batch: int = 64,
) -> KdResult:
    """Distill the teacher's soft targets into a fresh student; evaluate on real data."""
    images = np.asarray(images)
    student = ClassifierModel(student_cfg, seed=seed)
    opt = Adam(student.params(), lr=lr)
    rng = np.random.default_rng([seed, 0xD15])
    tau = float(temperature)
    teacher_logits = teacher.forward(Tensor(images)).data
    soft = T.softmax(Tensor(teacher_logits / tau), axis=1).data
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            with Graph() as g:
                logits = student.forward(Tensor(images[idx]), training=True)
                logp = T.log_softmax(T.mul(logits, 1.0 / tau), axis=1)
                # KL(student || teacher soft targets) up to the teacher-entropy constant
                loss = T.neg(T.tmean(T.tsum(T.mul(Tensor(soft[idx]), logp), axis=1)))
                g.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericError("distillation diverged")
            opt.step()
            opt.zero_grad()
    eval_logits = student.forward(Tensor(np.asarray(eval_images))).data
    accuracy = float(np.mean(np.argmax(eval_logits, axis=1) == np.asarray(eval_labels)))
    return KdResult(teacher_id="fixture-classifier", student_id="small-student", source=source, student_accuracy=accuracy)


def train_student_plain(
    student_cfg: ClassifierConfig,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    eval_images: np.ndarray,
    eval_labels: np.ndarray,
    seed: int = 0,
) -> float:
    """Direct cross-entropy training; the distillation sanity reference."""
    from .fixtures import FixtureDataset, train_classifier

    ds = FixtureDataset("filled", np.asarray(images), np.asarray(labels), seed)
    model, _ = train_classifier(ds, epochs=epochs, seed=seed, config=student_cfg)
    logits = model.forward(Tensor(np.asarray(eval_images))).data
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(eval_labels)))


# ---------------------------------------------------------------------------
# attention re-weighting sweep (visual artifact)
# ---------------------------------------------------------------------------


def attention_sweep_grid(engines, token, w_values, n: int, seed: int, out_path) -> np.ndarray:
    """Images for each attention scale, tiled into one grid file."""
    from .artifacts import write_image_grid
    from .cat import build_prompt, cat_condition
    from .guidance import guided_sample
    from .nets import attention_reweight

    prompt = build_prompt(token.class_id, engines.denoiser.vocab)
    cond = cat_condition(engines.denoiser.vocab, prompt, Tensor(token.vectors.data.copy()))
    panels = []
    for w in w_values:
        view = attention_reweight(engines.denoiser, token_index=0, w=float(w))
        img, _ = guided_sample(view, engines.codec, engines.classifier, engines.schedule, cond, engines.dag, seed, batch=n)
        panels.append(img.data)
    stacked = np.concatenate(panels, axis=0)
    if not np.all(np.isfinite(stacked)):
        raise NumericError("attention sweep produced non-finite images")
    write_image_grid(out_path, stacked, columns=n)
    return stacked
