"""Learnable class-token optimization against the frozen classifier.

One embedding row per class joins a two-token prompt; each epoch generates a
guided batch, scores it with the classifier, and updates only that row by
cross-entropy. Backpropagation is restricted to the final denoising step,
the decode, and the classifier (gradient skipping) unless disabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion, guidance, tensor as T
from .guidance import DagConfig, bn_alignment_loss, dag_correct, smooth_clamp
from .nets import ClassifierModel, weight_hash
from .optim import adam_update
from .tensor import Graph, NumericError, Tensor

CAT_SLOT = -1


class AblationUnsupportedError(RuntimeError):
    """Raised for ablations that would break the frozen-weights contract."""


class FrozenWeightError(AssertionError):
    """A supposedly frozen network changed during token optimization."""


@dataclass
class Engines:
    """The frozen machinery a token optimization runs against."""

    denoiser: object
    codec: object
    classifier: ClassifierModel
    schedule: diffusion.NoiseSchedule
    dag: DagConfig

    @property
    def cfg_scale(self) -> float:
        if self.dag.cfg_scale is not None:
            return float(self.dag.cfg_scale)
        return self.schedule.cfg_scale

    def frozen_hashes(self) -> tuple:
        return (weight_hash(self.denoiser), weight_hash(self.codec), weight_hash(self.classifier))


@dataclass
class PromptSpec:
    """Ordered token ids with CAT_SLOT sentinels marking learnable slots."""

    class_id: int
    tokens: list

    @property
    def n_cat_slots(self) -> int:
        return sum(1 for t in self.tokens if t == CAT_SLOT)

    def __post_init__(self):
        if self.n_cat_slots < 1:
            raise ValueError("prompt must contain at least one learnable slot")


@dataclass
class TokenEmbedding:
    """Learnable token row(s) for one class plus optimizer state and log."""

    class_id: int
    vectors: Tensor  # [n_tokens, embed_dim]
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    log: list = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def trainable_scalars(self) -> int:
        return int(self.vectors.size)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.vectors.data)):
            raise NumericError(f"token embedding for class {self.class_id} became non-finite")


@dataclass
class CatTrainConfig:
    lr: float = 0.005
    max_epochs: int = 30
    accumulation: int = 20
    early_stop: float = 0.7
    gradient_skip: bool = True
    extra_token_count: int = 0
    bn_loss_weight: float = 0.0
    unfreeze_denoiser: bool = False

    def __post_init__(self):
        if not (0.0 < self.early_stop <= 1.0):
            raise ValueError(f"early-stop threshold must lie in (0, 1], got {self.early_stop}")
        if self.accumulation < 1:
            raise ValueError(f"accumulation must be >= 1, got {self.accumulation}")

    @property
    def n_tokens(self) -> int:
        return 1 + int(self.extra_token_count)


def build_prompt(class_id: int, vocab) -> PromptSpec:
    """Two-token prompt [learnable slot, class label]; no prefix tokens."""
    label = vocab.label_token(class_id)  # raises for unknown labels
    return PromptSpec(class_id=class_id, tokens=[CAT_SLOT, label])


def multi_token_prompt(class_id: int, vocab, n_tokens: int) -> PromptSpec:
    label = vocab.label_token(class_id)
    return PromptSpec(class_id=class_id, tokens=[CAT_SLOT] * n_tokens + [label])


def cat_condition(vocab, prompt: PromptSpec, vectors: Tensor) -> Tensor:
    """Conditioning sequence for a prompt with its learnable rows spliced in."""
    if prompt.n_cat_slots != vectors.shape[0]:
        raise ValueError(f"prompt has {prompt.n_cat_slots} learnable slots, got {vectors.shape[0]} rows")
    parts = []
    used = 0
    for tok in prompt.tokens:
        if tok == CAT_SLOT:
            parts.append(T.take_rows(vectors, np.array([used])))
            used += 1
        else:
            parts.append(T.take_rows(vocab.table, np.array([int(tok)])))
    seq = T.concat(parts, axis=0)
    pos = T.take_rows(vocab.positional, np.arange(len(prompt.tokens)))
    return T.add(seq, pos)


def cross_entropy(logits: Tensor, class_id: int) -> Tensor:
    """Mean negative log softmax probability of the target class."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise T.ShapeError(f"cross_entropy: expected [B, N>=2] logits, got {logits.shape}")
    if not (0 <= class_id < logits.shape[1]):
        raise IndexError(f"class id {class_id} out of range for {logits.shape[1]} classes")
    return T.neg(T.tmean(T.take_column(T.log_softmax(logits, axis=1), class_id)))


def init_token(engines: Engines, class_id: int, config: CatTrainConfig, seed: int) -> TokenEmbedding:
    """Fresh meaning-free rows, norm-matched to the existing vocabulary."""
    vocab = engines.denoiser.vocab
    rng = np.random.default_rng([int(seed), int(class_id), 0xCA7])
    rows = rng.standard_normal((config.n_tokens, vocab.embed_dim))
    target = vocab.mean_row_norm()
    rows *= target / np.linalg.norm(rows, axis=1, keepdims=True)
    return TokenEmbedding(
        class_id=class_id,
        vectors=Tensor(rows, requires_grad=True),
        m=np.zeros_like(rows),
        v=np.zeros_like(rows),
    )


def _stacked_latents(engines: Engines, seeds) -> np.ndarray:
    shape = engines.codec.latent_shape()
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds])


def _trajectory_to_final(engines: Engines, cond_const, z_init: np.ndarray, rng) -> tuple:
    """Run the guided reverse chain up to (and including) the final correction.

    Returns (corrected latent entering the final step, final step index info,
    per-step loss series). Nothing here records gradients.
    """
    schedule = engines.schedule
    running = engines.classifier.running_statistics()
    s = engines.cfg_scale
    z = z_init
    series = []
    for i in reversed(range(schedule.t_sample)):
        t = int(schedule.taus[i])
        t_prev = int(schedule.prev_taus[i])
        if engines.dag.applies_at(t):
            z_corr, l_bn, _, _ = dag_correct(z, engines.classifier, engines.codec, running, engines.dag)
        else:
            z_corr, l_bn = z, None
        series.append((t, l_bn))
        if i == 0:
            return z_corr, (t, t_prev), series
        eps = diffusion.cfg_epsilon(engines.denoiser, Tensor(z_corr), t, cond_const, s).data
        sigma = diffusion.step_sigma(schedule, t, t_prev)
        noise = Tensor(rng.standard_normal(z.shape)) if sigma > 0 else None
        z = diffusion.ddim_step(Tensor(z_corr), Tensor(eps), t, t_prev, schedule, noise=noise).data
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent at guided step {i} (t={t})")
    raise RuntimeError("unreachable")  # pragma: no cover


def final_step_loss(engines: Engines, cat: TokenEmbedding, prompt: PromptSpec, z_final: np.ndarray, step_pair: tuple, config: CatTrainConfig):
    """Differentiable tail of the chain: final update, decode, classify.

    Pure function of (token rows, frozen weights, z_final); replaying it from
    a stored z_final reproduces gradients bit-exactly.
    """
    t, t_prev = step_pair
    vocab = engines.denoiser.vocab
    with Graph() as g:
        cond = cat_condition(vocab, prompt, cat.vectors)
        eps = diffusion.cfg_epsilon(engines.denoiser, Tensor(z_final), t, cond, engines.cfg_scale)
        z0 = diffusion.ddim_step(Tensor(z_final), eps, t, t_prev, engines.schedule)
        images = engines.codec.decode(z0)
        capture = config.bn_loss_weight != 0.0
        if capture:
            logits, stats = engines.classifier.forward(images, capture=True)
        else:
            logits = engines.classifier.forward(images)
        ce = cross_entropy(logits, cat.class_id)
        loss = ce
        if config.bn_loss_weight != 0.0:
            bn = bn_alignment_loss(stats, engines.classifier.running_statistics())
            loss = T.add(loss, T.mul(bn, float(config.bn_loss_weight)))
        g.backward(loss)
    return float(ce.item()), logits.data, images.data


def _full_trace_loss(engines: Engines, cat: TokenEmbedding, prompt: PromptSpec, z_init: np.ndarray, rng, config: CatTrainConfig):
    """Ablation path: backpropagate through every sampling step.

    Guidance corrections enter as constants (their own gradient is not
    differentiated through; second-order transport is out of scope).
    """
    schedule = engines.schedule
    running = engines.classifier.running_statistics()
    s = engines.cfg_scale
    with Graph() as g:
        cond = cat_condition(engines.denoiser.vocab, prompt, cat.vectors)
        z = Tensor(z_init)
        for i in reversed(range(schedule.t_sample)):
            t = int(schedule.taus[i])
            t_prev = int(schedule.prev_taus[i])
            if engines.dag.applies_at(t):
                corr, _, _, _ = dag_correct(z.data, engines.classifier, engines.codec, running, engines.dag)
                z = T.add(z, Tensor(corr - z.data))
            eps = diffusion.cfg_epsilon(engines.denoiser, z, t, cond, s)
            sigma = diffusion.step_sigma(schedule, t, t_prev)
            noise = Tensor(rng.standard_normal(z.shape)) if sigma > 0 else None
            z = diffusion.ddim_step(z, eps, t, t_prev, schedule, noise=noise)
        images = engines.codec.decode(z)
        logits = engines.classifier.forward(images)
        ce = cross_entropy(logits, cat.class_id)
        loss = ce
        if config.bn_loss_weight != 0.0:
            _, stats = engines.classifier.forward(images, capture=True)
            loss = T.add(loss, T.mul(bn_alignment_loss(stats, running), float(config.bn_loss_weight)))
        g.backward(loss)
    return float(ce.item()), logits.data, images.data


def cat_epoch(cat: TokenEmbedding, engines: Engines, config: CatTrainConfig, seeds) -> tuple:
    """One accumulation epoch: generate a seeded batch, update the token rows.

    The whole batch flows jointly (the guidance statistics are batch-joint and
    the mean cross-entropy gradient equals the accumulated per-seed mean), and
    exactly one Adam update lands on the token rows.
    """
    seeds = list(seeds)
    if len(seeds) != config.accumulation:
        raise ValueError(f"need {config.accumulation} seeds, got {len(seeds)}")
    if config.unfreeze_denoiser:
        raise AblationUnsupportedError(
            "unfreezing the denoiser is intentionally unsupported: token optimization "
            "relies on every network staying frozen"
        )
    hashes_before = engines.frozen_hashes()
    prompt = (
        build_prompt(cat.class_id, engines.denoiser.vocab)
        if cat.n_tokens == 1
        else multi_token_prompt(cat.class_id, engines.denoiser.vocab, cat.n_tokens)
    )
    z_init = _stacked_latents(engines, seeds)
    rng = np.random.default_rng(np.asarray(seeds, dtype=np.uint64))

    cat.vectors.zero_grad()
    if config.gradient_skip:
        cond_const = cat_condition(engines.denoiser.vocab, prompt, Tensor(cat.vectors.data.copy()))
        z_final, step_pair, _ = _trajectory_to_final(engines, cond_const, z_init, rng)
        mean_ce, logits, images = final_step_loss(engines, cat, prompt, z_final, step_pair, config)
    else:
        mean_ce, logits, images = _full_trace_loss(engines, cat, prompt, z_init, rng, config)

    grad = cat.vectors.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise NumericError(f"epoch aborted: non-finite token gradient for class {cat.class_id}")

    new_value, cat.m, cat.v, cat.step = adam_update(
        cat.vectors.data, grad, cat.m, cat.v, cat.step, lr=config.lr
    )
    cat.vectors.data = new_value
    cat.check_finite()

    correct = float(np.mean(np.argmax(logits, axis=1) == cat.class_id))
    stats = {
        "mean_ce": mean_ce,
        "correct_fraction": correct,
        "mean_confidence": float(
            np.mean(np.exp(logits - logits.max(axis=1, keepdims=True))[np.arange(len(logits)), cat.class_id]
                    / np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1))
        ),
    }
    if engines.frozen_hashes() != hashes_before:
        raise FrozenWeightError("frozen network weights changed during a token epoch")
    return cat, stats


def optimize_cat(engines: Engines, class_id: int, config: CatTrainConfig, seed: int) -> TokenEmbedding:
    """Token optimization loop with early stopping on batch correct-fraction."""
    if config.unfreeze_denoiser:
        raise AblationUnsupportedError(
            "unfreezing the denoiser is intentionally unsupported: token optimization "
            "relies on every network staying frozen"
        )
    cat = init_token(engines, class_id, config, seed)
    stream = np.random.default_rng([int(seed), int(class_id)])
    for epoch in range(config.max_epochs):
        seeds = stream.integers(0, 2**62, size=config.accumulation)
        cat, stats = cat_epoch(cat, engines, config, seeds)
        cat.log.append({"epoch": epoch, **stats})
        if stats["correct_fraction"] >= config.early_stop:
            break
    return cat


def untrained_correct_fraction(engines: Engines, class_id: int, config: CatTrainConfig, seed: int) -> float:
    """Correct-fraction of a freshly initialized token, no updates applied."""
    cat = init_token(engines, class_id, config, seed)
    prompt = build_prompt(class_id, engines.denoiser.vocab) if cat.n_tokens == 1 else multi_token_prompt(class_id, engines.denoiser.vocab, cat.n_tokens)
    stream = np.random.default_rng([int(seed), int(class_id)])
    seeds = stream.integers(0, 2**62, size=config.accumulation)
    z_init = _stacked_latents(engines, seeds)
    rng = np.random.default_rng(np.asarray(seeds, dtype=np.uint64))
    cond = cat_condition(engines.denoiser.vocab, prompt, Tensor(cat.vectors.data.copy()))
    z_final, step_pair, _ = _trajectory_to_final(engines, cond, z_init, rng)
    t, t_prev = step_pair
    eps = diffusion.cfg_epsilon(engines.denoiser, Tensor(z_final), t, cond, engines.cfg_scale)
    z0 = diffusion.ddim_step(Tensor(z_final), eps, t, t_prev, engines.schedule)
    logits = engines.classifier.forward(engines.codec.decode(z0)).data
    return float(np.mean(np.argmax(logits, axis=1) == class_id))


def generate_with_token(engines: Engines, cat: TokenEmbedding, n: int, seed: int, batch: int | None = None):
    """Sample n images with the frozen optimized token; returns (images, seeds used)."""
    prompt = (
        build_prompt(cat.class_id, engines.denoiser.vocab)
        if cat.n_tokens == 1
        else multi_token_prompt(cat.class_id, engines.denoiser.vocab, cat.n_tokens)
    )
    cond = cat_condition(engines.denoiser.vocab, prompt, Tensor(cat.vectors.data.copy()))
    batch = batch or engines.dag.batch
    images = []
    seeds_used = []
    offset = 0
    while offset < n:
        take = min(batch, n - offset)
        run_seed = int(np.random.default_rng([int(seed), int(cat.class_id), offset]).integers(0, 2**62))
        img, _ = guidance.guided_sample(
            engines.denoiser, engines.codec, engines.classifier, engines.schedule,
            cond, engines.dag, run_seed, batch=take,
        )
        images.append(img.data)
        seeds_used.extend([run_seed] * take)
        offset += take
    return np.concatenate(images, axis=0)[:n], seeds_used


def ddis_synthesize(engines: Engines, class_ids, config: CatTrainConfig, per_class: int, seed: int, tokens: dict | None = None):
    """Full pipeline: per class, optimize the token if absent, then sample.

    Returns (images by class, manifest rows, tokens by class). Persisted
    tokens short-circuit optimization entirely.
    """
    tokens = dict(tokens) if tokens else {}
    images = {}
    manifest = []
    for class_id in class_ids:
        if class_id not in tokens:
            tokens[class_id] = optimize_cat(engines, class_id, config, seed)
        imgs, seeds_used = generate_with_token(engines, tokens[class_id], per_class, seed)
        images[class_id] = imgs
        for i, s in enumerate(seeds_used):
            manifest.append({"class_id": int(class_id), "index": i, "seed": int(s)})
    return images, manifest, tokens
