"""Procedural multi-domain shape datasets and the frozen-checkpoint trainers.

Seven 16x16 grayscale shape classes rendered in two visual domains (filled
shapes on dark ground vs. stroked outlines on light ground) stand in for the
inaccessible training sets; the classifier, denoiser, and codec trained here
are the frozen networks everything else inverts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, tensor as T
from .nets import (
    ClassifierConfig,
    ClassifierModel,
    DenoiserConfig,
    DenoiserModel,
    IdentityCodec,
    LearnedCodec,
    PAD_TOKEN,
)
from .optim import Adam
from .tensor import Graph, NumericError, Tensor

CLASS_NAMES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond")
DOMAINS = ("filled", "outline")
IMAGE_SIZE = 16

# per-shape rotation jitter in radians; four-fold symmetric shapes stay axis
# aligned (a quarter-turn square is a diamond)
_ROTATION = {"disk": 0.0, "square": 0.0, "triangle": 0.45, "cross": 0.35, "ring": 0.0, "bar": 0.5, "diamond": 0.0}


def _shape_sdf(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "disk":
        return np.hypot(x, y) - 4.5
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 4.0
    if name == "triangle":
        # upward triangle: base y=3.2, sides through (0,-4.6)
        k = 0.55
        return np.maximum(y - 3.2, np.maximum(k * x - 0.5 * (y + 4.6), -k * x - 0.5 * (y + 4.6)))
    if name == "cross":
        horiz = np.maximum(np.abs(x) - 4.8, np.abs(y) - 1.4)
        vert = np.maximum(np.abs(y) - 4.8, np.abs(x) - 1.4)
        return np.minimum(horiz, vert)
    if name == "ring":
        return np.abs(np.hypot(x, y) - 3.6) - 1.2
    if name == "bar":
        return np.maximum(np.abs(x) - 5.2, np.abs(y) - 1.6)
    if name == "diamond":
        return np.abs(x) + np.abs(y) - 4.8
    raise ValueError(f"unknown shape {name!r}")


def _render(name: str, domain: str, dx: float, dy: float, scale: float, angle: float) -> np.ndarray:
    grid = np.arange(IMAGE_SIZE) - (IMAGE_SIZE - 1) / 2.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    xs, ys = xx - dx, yy - dy
    if angle:
        c, s = np.cos(angle), np.sin(angle)
        xs, ys = c * xs + s * ys, -s * xs + c * ys
    sdf = _shape_sdf(name, xs / scale, ys / scale) * scale
    if domain == "filled":
        coverage = np.clip(0.5 - sdf, 0.0, 1.0)
        return -1.0 + 1.8 * coverage
    coverage = np.clip(0.5 - (np.abs(sdf) - 0.9), 0.0, 1.0)
    return 0.9 - 1.7 * coverage


@dataclass
class FixtureDataset:
    domain: str
    images: np.ndarray  # [N, 1, 16, 16] in [-1, 1]
    labels: np.ndarray  # [N]
    seed: int

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.domain.encode())
        digest.update(np.ascontiguousarray(self.images, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return digest.hexdigest()

    def split(self, fraction: float, seed: int = 0) -> tuple:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.labels))
        cut = int(len(order) * fraction)
        a, b = order[:cut], order[cut:]
        return (
            FixtureDataset(self.domain, self.images[a], self.labels[a], self.seed),
            FixtureDataset(self.domain, self.images[b], self.labels[b], self.seed),
        )


def generate_dataset(domain: str, n_per_class: int, seed: int) -> FixtureDataset:
    """Rasterize jittered parameterized shapes; deterministic in (seed, domain, n)."""
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng([seed, DOMAINS.index(domain)])
    images, labels = [], []
    for class_id, name in enumerate(CLASS_NAMES):
        for _ in range(n_per_class):
            dx, dy = rng.uniform(-2.0, 2.0, size=2)
            scale = rng.uniform(0.8, 1.2)
            max_rot = _ROTATION[name]
            angle = rng.uniform(-max_rot, max_rot) if max_rot else 0.0
            images.append(_render(name, domain, dx, dy, scale, angle))
            labels.append(class_id)
    images = np.clip(np.stack(images), -1.0, 1.0)[:, None, :, :]
    return FixtureDataset(domain=domain, images=images, labels=np.array(labels), seed=seed)


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


def _batches(n: int, batch: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def classifier_accuracy(model: ClassifierModel, dataset: FixtureDataset) -> float:
    logits = model.forward(Tensor(dataset.images)).data
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def train_classifier(
    dataset: FixtureDataset,
    epochs: int = 5,
    seed: int = 0,
    lr: float = 2e-3,
    batch: int = 64,
    config: ClassifierConfig | None = None,
) -> tuple:
    """SGD-style training in BN train mode; returns (model, info)."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    config = config or ClassifierConfig(n_classes=dataset.n_classes)
    model = ClassifierModel(config, seed=seed)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([seed, 0xC1A55])
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for idx in _batches(len(dataset.labels), batch, rng):
            x = Tensor(dataset.images[idx])
            with Graph() as g:
                logits = model.forward(x, training=True)
                logp = T.log_softmax(logits, axis=1)
                loss = T.neg(T.tmean(_gather_labels(logp, dataset.labels[idx])))
                g.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericError("classifier training diverged (non-finite loss)")
            opt.step()
            opt.zero_grad()
            epoch_loss += loss.item()
        losses.append(epoch_loss)
    accuracy = classifier_accuracy(model, dataset)
    return model, {"train_accuracy": accuracy, "epoch_losses": losses}


def _gather_labels(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Pick logp[i, labels[i]] for each row."""
    n, k = logp.shape
    flat = T.reshape(logp, (n * k,))
    idx = np.arange(n) * k + labels
    return T.take_rows(T.reshape(flat, (n * k, 1)), idx)


def _cast_params(model, dtype) -> None:
    """Switch a model's parameters to the given numeric mode in place."""
    for p in model.params():
        p.data = p.data.astype(dtype)


def train_denoiser(
    dataset: FixtureDataset,
    schedule: diffusion.NoiseSchedule,
    epochs: int = 40,
    seed: int = 0,
    lr: float = 2e-3,
    batch: int = 64,
    cond_dropout: float = 0.1,
    config: DenoiserConfig | None = None,
    dtype=np.float32,
) -> tuple:
    """Noise-prediction training with label conditioning and condition dropout.

    Trains in 32-bit by default for speed; the returned checkpoint is cast to
    the engine's 64-bit working precision.
    """
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    config = config or DenoiserConfig(n_labels=dataset.n_classes)
    model = DenoiserModel(config, seed=seed)
    _cast_params(model, dtype)
    images = dataset.images.astype(dtype)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([seed, 0xD1FF])
    losses = []
    for _ in range(epochs):
        epoch_loss, n_batches = 0.0, 0
        for idx in _batches(len(dataset.labels), batch, rng):
            x0 = images[idx]
            b = len(idx)
            t = rng.integers(1, schedule.t_train + 1, size=b)
            eps = rng.standard_normal(x0.shape).astype(dtype)
            x_t = diffusion.q_sample(Tensor(x0), t, Tensor(eps), schedule)
            ids = np.stack([np.full(b, PAD_TOKEN), 1 + dataset.labels[idx]], axis=1)
            null_mask = rng.random(b) < cond_dropout
            with Graph() as g:
                pred = model.forward(Tensor(x_t.data.astype(dtype)), t, ids, null_mask=null_mask)
                diff = T.sub(pred, Tensor(eps))
                loss = T.tmean(T.mul(diff, diff))
                g.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericError("denoiser training diverged (non-finite loss)")
            if model.vocab.table.grad is not None:
                model.vocab.table.grad[PAD_TOKEN] = 0.0  # padding row stays zero
            opt.step()
            opt.zero_grad()
            model.vocab.table.data[PAD_TOKEN] = 0.0
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    _cast_params(model, np.float64)
    return model, {"epoch_losses": losses}


def train_codec(
    dataset: FixtureDataset,
    epochs: int = 40,
    seed: int = 0,
    lr: float = 3e-3,
    batch: int = 64,
    hidden: int = 16,
    dtype=np.float32,
) -> tuple:
    """Reconstruction-train the latent-space autoencoder variant."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    model = LearnedCodec(image_shape=dataset.images.shape[1:], hidden=hidden, seed=seed)
    _cast_params(model, dtype)
    images = dataset.images.astype(dtype)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([seed, 0xC0DEC])
    losses = []
    for _ in range(epochs):
        epoch_loss, n_batches = 0.0, 0
        for idx in _batches(len(dataset.labels), batch, rng):
            x = Tensor(images[idx])
            with Graph() as g:
                recon = model.decode(model.encode(x))
                diff = T.sub(recon, x)
                loss = T.tmean(T.mul(diff, diff))
                g.backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericError("codec training diverged (non-finite loss)")
            opt.step()
            opt.zero_grad()
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    _cast_params(model, np.float64)
    recon = model.decode(model.encode(Tensor(dataset.images))).data
    mean_abs_err = float(np.mean(np.abs(recon - dataset.images)))
    return model, {"epoch_losses": losses, "mean_abs_error": mean_abs_err}


# ---------------------------------------------------------------------------
# bundle: everything the rest of the system inverts
# ---------------------------------------------------------------------------


@dataclass
class FixtureBundle:
    train_set: FixtureDataset
    heldout_set: FixtureDataset
    other_domain_set: FixtureDataset
    classifier: ClassifierModel
    denoiser: DenoiserModel
    codec_identity: IdentityCodec
    codec_learned: LearnedCodec
    schedule: diffusion.NoiseSchedule
    manifest: dict = field(default_factory=dict)


def unguided_agreement_rate(bundle: FixtureBundle, n_per_class: int, seed: int = 0) -> float:
    """Top-1 agreement of plain conditional samples with their target class."""
    hits, total = 0, 0
    for class_id in range(len(CLASS_NAMES)):
        cond = bundle.denoiser.label_cond(class_id)
        image, _ = diffusion.sample(
            bundle.denoiser, bundle.codec_identity, bundle.schedule, cond,
            seed=seed + class_id, batch=n_per_class,
        )
        logits = bundle.classifier.forward(image).data
        hits += int(np.sum(np.argmax(logits, axis=1) == class_id))
        total += n_per_class
    return hits / total


def calibrate_dag_descent_eta(bundle: FixtureBundle, seed: int = 7, batch: int = 8) -> float:
    """Largest grid eta at which one correction step still strictly lowers the loss."""
    from .guidance import DagConfig, dag_correct, final_alignment_loss

    running = bundle.classifier.running_statistics()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, *bundle.codec_identity.latent_shape()))
    best = 0.0
    for eta in (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1):
        config = DagConfig(lambda_bn=eta, s_g=1.0, batch=batch)
        z_corr, before, _, _ = dag_correct(z, bundle.classifier, bundle.codec_identity, running, config)
        after = final_alignment_loss(z_corr, bundle.classifier, running)
        if after < before:
            best = eta
    return best


def build_fixture_bundle(
    master_seed: int = 0,
    n_per_class: int = 400,
    heldout_per_class: int = 100,
    domain: str = "filled",
    classifier_epochs: int = 6,
    denoiser_epochs: int = 60,
    codec_epochs: int = 25,
    t_sample: int = 30,
    cfg_scale: float = 15.0,
) -> FixtureBundle:
    """Deterministic end-to-end fixture build with measured baselines."""
    other = DOMAINS[1 - DOMAINS.index(domain)]
    train_set = generate_dataset(domain, n_per_class, master_seed)
    heldout_set = generate_dataset(domain, heldout_per_class, master_seed + 1)
    other_set = generate_dataset(other, heldout_per_class, master_seed + 2)
    schedule = diffusion.make_schedule(t_sample=t_sample, cfg_scale=cfg_scale, x0_clip=(-1.0, 1.0))

    classifier, clf_info = train_classifier(train_set, epochs=classifier_epochs, seed=master_seed)
    denoiser, den_info = train_denoiser(train_set, schedule, epochs=denoiser_epochs, seed=master_seed)
    codec_learned, codec_info = train_codec(train_set, epochs=codec_epochs, seed=master_seed)
    bundle = FixtureBundle(
        train_set=train_set,
        heldout_set=heldout_set,
        other_domain_set=other_set,
        classifier=classifier,
        denoiser=denoiser,
        codec_identity=IdentityCodec(train_set.images.shape[1:]),
        codec_learned=codec_learned,
        schedule=schedule,
    )
    from .nets import weight_hash

    heldout_acc = classifier_accuracy(classifier, heldout_set)
    agreement = unguided_agreement_rate(bundle, n_per_class=8, seed=master_seed + 11)
    bundle.manifest = {
        "master_seed": master_seed,
        "domain": domain,
        "n_per_class": n_per_class,
        "train_set_hash": train_set.content_hash(),
        "heldout_set_hash": heldout_set.content_hash(),
        "other_domain_set_hash": other_set.content_hash(),
        "classifier_hash": weight_hash(classifier),
        "denoiser_hash": weight_hash(denoiser),
        "codec_hash": weight_hash(codec_learned),
        "classifier_train_accuracy": clf_info["train_accuracy"],
        "classifier_heldout_accuracy": heldout_acc,
        "denoiser_final_loss": den_info["epoch_losses"][-1],
        "codec_recon_error": codec_info["mean_abs_error"],
        "unguided_agreement_rate": agreement,
        "dag_descent_eta": calibrate_dag_descent_eta(bundle),
    }
    return bundle
