"""The three networks the engine manipulates plus conditioning machinery.

* frozen batch-norm classifier whose running statistics are the only surviving
  summary of its training distribution,
* a small conditional U-Net noise predictor with a single cross-attention
  block over a learned token-embedding table (the text-encoder stand-in),
* an image/latent codec (exact identity by default, a trainable autoencoder
  as the latent-space variant).

Models are immutable after loading; concurrent read-only forwards on separate
graphs are safe.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class StatisticsError(RuntimeError):
    """Running statistics requested before any training batch populated them."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2dLayer:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, rng=None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding, bias=self.bias)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class ConvTranspose2dLayer:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, rng=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cin, cout, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d_transpose(x, self.weight, stride=self.stride, padding=self.padding)
        return T.add(out, T.reshape(self.bias, (1, -1, 1, 1)))

    def params(self):
        return [self.weight, self.bias]


class LinearLayer:
    def __init__(self, nin: int, nout: int, rng=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (nin + nout))
        self.weight = Tensor(rng.normal(0.0, std, (nin, nout)), requires_grad=True)
        self.bias = Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class BatchNorm2d:
    """Per-channel batch norm tracking running statistics with EMA momentum.

    The population (biased) variance is used everywhere — normalization,
    running updates, and captured batch statistics — so a momentum-1.0
    training batch reproduces capture-mode statistics exactly.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.batches_tracked = 0

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def batch_stats(self, h: Tensor) -> tuple[Tensor, Tensor]:
        mean = T.tmean(h, axis=(0, 2, 3))
        var = T.variance(h, axis=(0, 2, 3))
        return mean, var

    def __call__(self, h: Tensor, training: bool = False) -> Tensor:
        if h.ndim != 4 or h.shape[1] != self.channels:
            raise ShapeError(f"batch_norm: input {h.shape} does not carry {self.channels} channels")
        if training:
            mean, var = self.batch_stats(h)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data
            self.batches_tracked += 1
            mean_b = T.reshape(mean, (1, -1, 1, 1))
            inv = T.div(1.0, T.tsqrt(T.add(T.reshape(var, (1, -1, 1, 1)), self.eps)))
            hhat = T.mul(T.sub(h, mean_b), inv)
        else:
            mean_c = self.running_mean.reshape(1, -1, 1, 1)
            inv_c = 1.0 / np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            hhat = T.mul(T.sub(h, Tensor(mean_c)), Tensor(inv_c))
        return T.add(T.mul(hhat, T.reshape(self.gamma, (1, -1, 1, 1))), T.reshape(self.beta, (1, -1, 1, 1)))

    def params(self):
        return [self.gamma, self.beta]


# ---------------------------------------------------------------------------
# feature statistics
# ---------------------------------------------------------------------------


@dataclass
class FeatureStatistics:
    """Per-layer, per-channel mean and variance of pre-normalization features."""

    means: list
    variances: list

    def channel_widths(self) -> tuple:
        return tuple(int(np.asarray(m.data if isinstance(m, Tensor) else m).shape[0]) for m in self.means)

    def detached(self) -> "FeatureStatistics":
        to_np = lambda x: np.array(x.data if isinstance(x, Tensor) else x)
        return FeatureStatistics([to_np(m) for m in self.means], [to_np(v) for v in self.variances])

    def structure_matches(self, other: "FeatureStatistics") -> bool:
        return self.channel_widths() == other.channel_widths()


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    in_channels: int = 1
    image_size: int = 16
    channels: tuple = (12, 24, 48)
    n_classes: int = 7
    bn_momentum: float = 0.1

    def feature_dim(self) -> int:
        side = self.image_size // (2 ** len(self.channels))
        if side < 1:
            raise ShapeError(f"classifier: {len(self.channels)} pooling stages exhaust a {self.image_size}px input")
        return self.channels[-1] * side * side


class ClassifierModel:
    """Conv -> batch-norm -> relu -> pool blocks with a linear class head."""

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.convs: list[Conv2dLayer] = []
        self.bns: list[BatchNorm2d] = []
        cin = config.in_channels
        for cout in config.channels:
            self.convs.append(Conv2dLayer(cin, cout, 3, stride=1, padding=1, rng=rng))
            self.bns.append(BatchNorm2d(cout, momentum=config.bn_momentum))
            cin = cout
        self.head = LinearLayer(config.feature_dim(), config.n_classes, rng=rng)

    @property
    def n_bn_layers(self) -> int:
        return len(self.bns)

    def _trunk(self, x: Tensor, capture: bool, training: bool):
        stats_m, stats_v = [], []
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = conv(h)
            if capture:
                m, v = bn.batch_stats(h)
                stats_m.append(m)
                stats_v.append(v)
            h = bn(h, training=training)
            h = T.relu(h)
            h = T.max_pool2d(h, 2)
        feats = T.reshape(h, (h.shape[0], -1))
        stats = FeatureStatistics(stats_m, stats_v) if capture else None
        return feats, stats

    def forward(self, images: Tensor, capture: bool = False, training: bool = False):
        """Logits for a [B,C,H,W] batch; optional pre-BN batch statistics.

        Capture never mutates running statistics (it reads the pre-norm
        activations on the side); eval-mode normalization always uses the
        stored running statistics.
        """
        images = T.as_tensor(images)
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"classifier: expected [B,{self.config.in_channels},H,W] images, got {images.shape}"
            )
        if images.shape[2] != self.config.image_size or images.shape[3] != self.config.image_size:
            raise ShapeError(
                f"classifier: expected {self.config.image_size}px input, got {images.shape}"
            )
        feats, stats = self._trunk(images, capture, training)
        logits = self.head(feats)
        if capture:
            return logits, stats
        return logits

    def features(self, images: Tensor) -> Tensor:
        """Penultimate (pre-head) feature vectors, eval mode."""
        feats, _ = self._trunk(T.as_tensor(images), capture=False, training=False)
        return feats

    def running_statistics(self) -> FeatureStatistics:
        if any(bn.batches_tracked == 0 for bn in self.bns):
            raise StatisticsError("running statistics uninitialized: model has not seen a training batch")
        return FeatureStatistics(
            [bn.running_mean.copy() for bn in self.bns],
            [bn.running_var.copy() for bn in self.bns],
        )

    def params(self):
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out += conv.params() + bn.params()
        return out + self.head.params()

    # persistence -----------------------------------------------------------
    def meta_dict(self) -> dict:
        c = self.config
        return {
            "kind": "classifier",
            "in_channels": c.in_channels,
            "image_size": c.image_size,
            "channels": list(c.channels),
            "n_classes": c.n_classes,
            "bn_momentum": c.bn_momentum,
            "batches_tracked": [bn.batches_tracked for bn in self.bns],
        }

    def state_arrays(self) -> list:
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.append((f"conv{i}.weight", conv.weight.data))
            out.append((f"conv{i}.bias", conv.bias.data))
            out.append((f"bn{i}.gamma", bn.gamma.data))
            out.append((f"bn{i}.beta", bn.beta.data))
            out.append((f"bn{i}.running_mean", bn.running_mean))
            out.append((f"bn{i}.running_var", bn.running_var))
        out.append(("head.weight", self.head.weight.data))
        out.append(("head.bias", self.head.bias.data))
        return out

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "ClassifierModel":
        config = ClassifierConfig(
            in_channels=meta["in_channels"],
            image_size=meta["image_size"],
            channels=tuple(meta["channels"]),
            n_classes=meta["n_classes"],
            bn_momentum=meta["bn_momentum"],
        )
        model = cls(config)
        for i, (conv, bn) in enumerate(zip(model.convs, model.bns)):
            conv.weight.data = arrays[f"conv{i}.weight"].copy()
            conv.bias.data = arrays[f"conv{i}.bias"].copy()
            bn.gamma.data = arrays[f"bn{i}.gamma"].copy()
            bn.beta.data = arrays[f"bn{i}.beta"].copy()
            bn.running_mean = arrays[f"bn{i}.running_mean"].copy()
            bn.running_var = arrays[f"bn{i}.running_var"].copy()
            bn.batches_tracked = int(meta["batches_tracked"][i])
        model.head.weight.data = arrays["head.weight"].copy()
        model.head.bias.data = arrays["head.bias"].copy()
        return model


def classifier_forward(model: ClassifierModel, images, capture: bool = False):
    """Eval-mode forward; with capture, also returns batch feature statistics."""
    return model.forward(images, capture=capture, training=False)


def running_statistics(model: ClassifierModel) -> FeatureStatistics:
    return model.running_statistics()


# ---------------------------------------------------------------------------
# conditioning vocabulary
# ---------------------------------------------------------------------------

PAD_TOKEN = 0


class ConditioningVocabulary:
    """Token-id to embedding-row table with positional slot embeddings.

    Row 0 is the reserved padding token and stays pinned at zero; label tokens
    occupy rows 1..n. New rows (learned class tokens) can be appended, and the
    prompt-embedding path accepts external row tensors so a single row can be
    optimized while every stored row stays frozen.
    """

    def __init__(self, n_labels: int, embed_dim: int, n_slots: int = 8, rng=None):
        rng = rng or np.random.default_rng(0)
        table = rng.normal(0.0, 0.02, (1 + n_labels, embed_dim))
        table[PAD_TOKEN] = 0.0
        self.table = Tensor(table, requires_grad=True)
        self.positional = Tensor(rng.normal(0.0, 0.02, (n_slots, embed_dim)), requires_grad=True)
        self.n_labels = n_labels

    @property
    def embed_dim(self) -> int:
        return self.table.shape[1]

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def label_token(self, class_id: int) -> int:
        if not (0 <= class_id < self.n_labels):
            raise IndexError(f"class id {class_id} outside vocabulary with {self.n_labels} labels")
        return 1 + class_id

    def check_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise IndexError(f"token id out of vocabulary (size {self.size}): {ids.tolist()}")

    def embed_ids(self, ids, null_mask=None) -> Tensor:
        """Embed [S] or [B,S] token ids; null_mask zeroes whole sequences."""
        ids = np.asarray(ids, dtype=np.int64)
        self.check_ids(ids)
        squeeze = ids.ndim == 1
        ids2 = ids.reshape(1, -1) if squeeze else ids
        B, S = ids2.shape
        rows = T.reshape(T.take_rows(self.table, ids2.reshape(-1)), (B, S, self.embed_dim))
        pos = T.reshape(T.take_rows(self.positional, np.arange(S)), (1, S, self.embed_dim))
        seq = T.add(rows, pos)
        if null_mask is not None:
            mask = 1.0 - np.asarray(null_mask, dtype=seq.dtype).reshape(B, 1, 1)
            seq = T.mul(seq, Tensor(mask))
        return T.reshape(seq, (S, self.embed_dim)) if squeeze else seq

    def embed_prompt(self, slot_vectors: list) -> Tensor:
        """Embed a prompt given per-slot vectors (Tensor row or int token id).

        Token-id slots read frozen rows; Tensor slots flow gradients, which is
        how a single learnable class-token row joins the sequence.
        """
        rows = []
        for vec in slot_vectors:
            if isinstance(vec, Tensor):
                rows.append(T.reshape(vec, (1, self.embed_dim)))
            else:
                rows.append(T.take_rows(self.table, np.array([int(vec)])))
        seq = T.concat(rows, axis=0)
        pos = T.take_rows(self.positional, np.arange(len(rows)))
        return T.add(seq, pos)

    def mean_row_norm(self) -> float:
        rows = self.table.data[1:]
        return float(np.mean(np.linalg.norm(rows, axis=1)))

    def params(self):
        return [self.table, self.positional]


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Standard sin/cos timestep features for integer timesteps, shape [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(scale) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


class ResBlock:
    def __init__(self, cin: int, cout: int, time_dim: int, rng):
        self.conv1 = Conv2dLayer(cin, cout, 3, padding=1, rng=rng)
        self.conv2 = Conv2dLayer(cout, cout, 3, padding=1, rng=rng)
        self.tproj = LinearLayer(time_dim, cout, rng=rng)
        self.skip = Conv2dLayer(cin, cout, 1, rng=rng, bias=False) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(x)
        h = T.add(h, T.reshape(self.tproj(temb), (temb.shape[0], -1, 1, 1)))
        h = T.silu(h)
        h = self.conv2(h)
        res = self.skip(x) if self.skip is not None else x
        return T.silu(T.add(h, res))

    def params(self):
        out = self.conv1.params() + self.conv2.params() + self.tproj.params()
        if self.skip is not None:
            out += self.skip.params()
        return out


class CrossAttention:
    """Single-head cross-attention from spatial features to the token sequence."""

    def __init__(self, channels: int, embed_dim: int, attn_dim: int, rng):
        self.wq = Conv2dLayer(channels, attn_dim, 1, rng=rng)
        self.wk = LinearLayer(embed_dim, attn_dim, rng=rng)
        self.wv = LinearLayer(embed_dim, attn_dim, rng=rng)
        self.wo = Conv2dLayer(attn_dim, channels, 1, rng=rng)
        self.attn_dim = attn_dim

    def __call__(self, x: Tensor, cond: Tensor, reweight=None, attn_sink=None) -> Tensor:
        B, C, H, W = x.shape
        q = self.wq(x)  # [B, da, H, W]
        q = T.transpose(T.reshape(q, (B, self.attn_dim, H * W)), (0, 2, 1))  # [B, HW, da]
        if cond.ndim == 2:
            k = self.wk(cond)  # [S, da]
            v = self.wv(cond)
            scores = T.matmul(q, T.transpose(k, (1, 0)))  # [B, HW, S]
        else:
            Bc, S, _ = cond.shape
            k = T.reshape(self.wk(T.reshape(cond, (Bc * S, -1))), (Bc, S, self.attn_dim))
            v = T.reshape(self.wv(T.reshape(cond, (Bc * S, -1))), (Bc, S, self.attn_dim))
            scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
        attn = T.softmax(T.mul(scores, 1.0 / np.sqrt(self.attn_dim)), axis=-1)
        if reweight is not None:
            token_index, w = reweight
            S = attn.shape[-1]
            if not (0 <= token_index < S):
                raise IndexError(f"attention reweight token {token_index} outside sequence of {S}")
            colscale = np.ones(S)
            colscale[token_index] = w
            attn = T.mul(attn, Tensor(colscale))
            attn = T.div(attn, T.tsum(attn, axis=-1, keepdims=True))
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        out = T.matmul(attn, v)  # [B, HW, da]
        out = T.reshape(T.transpose(out, (0, 2, 1)), (B, self.attn_dim, H, W))
        return T.add(x, self.wo(out))

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


@dataclass
class DenoiserConfig:
    in_channels: int = 1
    image_size: int = 16
    base_channels: int = 16
    channel_mults: tuple = (1, 2)
    embed_dim: int = 16
    time_dim: int = 32
    attn_dim: int = 32
    n_labels: int = 7
    n_slots: int = 8


class DenoiserModel:
    """U-shaped conditional noise predictor with one bottleneck cross-attention."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.vocab = ConditioningVocabulary(c.n_labels, c.embed_dim, c.n_slots, rng=rng)
        self.t_mlp1 = LinearLayer(c.time_dim, c.time_dim, rng=rng)
        self.t_mlp2 = LinearLayer(c.time_dim, c.time_dim, rng=rng)
        self.conv_in = Conv2dLayer(c.in_channels, c.base_channels, 3, padding=1, rng=rng)
        chans = [c.base_channels * m for m in c.channel_mults]
        self.down_blocks: list[ResBlock] = []
        prev = c.base_channels
        for ch in chans:
            self.down_blocks.append(ResBlock(prev, ch, c.time_dim, rng))
            prev = ch
        mid = prev
        self.mid1 = ResBlock(mid, mid, c.time_dim, rng)
        self.attn = CrossAttention(mid, c.embed_dim, c.attn_dim, rng)
        self.mid2 = ResBlock(mid, mid, c.time_dim, rng)
        self.up_blocks: list[ResBlock] = []
        up_prev = mid
        for i in reversed(range(len(chans))):
            target = chans[i - 1] if i > 0 else c.base_channels
            self.up_blocks.append(ResBlock(up_prev + chans[i], target, c.time_dim, rng))
            up_prev = target
        self.conv_out = Conv2dLayer(up_prev, c.in_channels, 3, padding=1, rng=rng)

    @property
    def null_slots(self) -> int:
        return 2

    def _embed_cond(self, z: Tensor, cond) -> Tensor:
        if cond is None:
            return Tensor(np.zeros((self.null_slots, self.config.embed_dim), dtype=z.dtype))
        if isinstance(cond, Tensor):
            return cond
        if isinstance(cond, (list, tuple)) and any(isinstance(x, Tensor) for x in cond):
            return self.vocab.embed_prompt(list(cond))
        return self.vocab.embed_ids(np.asarray(cond))

    def forward(self, z: Tensor, t, cond=None, null_mask=None, reweight=None, attn_sink=None) -> Tensor:
        """Predict the noise content of latent z at timestep t.

        cond may be None (null condition: an all-zeros token sequence), token
        ids ([S] or [B,S] with optional per-sample null_mask), a pre-embedded
        sequence tensor, or a per-slot list mixing ids and row tensors.
        """
        z = T.as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.config.in_channels:
            raise ShapeError(f"denoiser: expected [B,{self.config.in_channels},H,W] latents, got {z.shape}")
        B = z.shape[0]
        if null_mask is not None:
            cond_seq = self.vocab.embed_ids(np.asarray(cond), null_mask=null_mask)
        else:
            cond_seq = self._embed_cond(z, cond)
        temb_in = Tensor(sinusoidal_embedding(np.broadcast_to(np.asarray(t), (B,)), self.config.time_dim).astype(z.dtype))
        temb = self.t_mlp2(T.silu(self.t_mlp1(temb_in)))
        h = self.conv_in(z)
        skips = []
        for block in self.down_blocks:
            h = block(h, temb)
            skips.append(h)
            h = T.avg_pool2d(h, 2)
        h = self.mid1(h, temb)
        h = self.attn(h, cond_seq, reweight=reweight, attn_sink=attn_sink)
        h = self.mid2(h, temb)
        for block, skip in zip(self.up_blocks, reversed(skips)):
            h = T.upsample_nearest(h, 2)
            h = T.concat([h, skip], axis=1)
            h = block(h, temb)
        return self.conv_out(h)

    def label_cond(self, class_id: int) -> np.ndarray:
        """Two-slot conditioning: [pad, label] keeps the label slot stable."""
        return np.array([PAD_TOKEN, self.vocab.label_token(class_id)], dtype=np.int64)

    def params(self):
        out = self.vocab.params() + self.t_mlp1.params() + self.t_mlp2.params() + self.conv_in.params()
        for b in self.down_blocks:
            out += b.params()
        out += self.mid1.params() + self.attn.params() + self.mid2.params()
        for b in self.up_blocks:
            out += b.params()
        return out + self.conv_out.params()

    # persistence -----------------------------------------------------------
    def meta_dict(self) -> dict:
        c = self.config
        return {
            "kind": "denoiser",
            "in_channels": c.in_channels,
            "image_size": c.image_size,
            "base_channels": c.base_channels,
            "channel_mults": list(c.channel_mults),
            "embed_dim": c.embed_dim,
            "time_dim": c.time_dim,
            "attn_dim": c.attn_dim,
            "n_labels": c.n_labels,
            "n_slots": c.n_slots,
        }

    def state_arrays(self) -> list:
        named = []

        def grab(prefix, layer):
            names = ["weight", "bias", "gamma", "beta"]
            for p, n in zip(layer.params(), names):
                named.append((f"{prefix}.{n}", p.data))

        named.append(("vocab.table", self.vocab.table.data))
        named.append(("vocab.positional", self.vocab.positional.data))
        grab("t_mlp1", self.t_mlp1)
        grab("t_mlp2", self.t_mlp2)
        grab("conv_in", self.conv_in)
        for i, b in enumerate(self.down_blocks):
            for j, p in enumerate(b.params()):
                named.append((f"down{i}.p{j}", p.data))
        for j, p in enumerate(self.mid1.params()):
            named.append((f"mid1.p{j}", p.data))
        for j, p in enumerate(self.attn.params()):
            named.append((f"attn.p{j}", p.data))
        for j, p in enumerate(self.mid2.params()):
            named.append((f"mid2.p{j}", p.data))
        for i, b in enumerate(self.up_blocks):
            for j, p in enumerate(b.params()):
                named.append((f"up{i}.p{j}", p.data))
        grab("conv_out", self.conv_out)
        return named

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "DenoiserModel":
        config = DenoiserConfig(
            in_channels=meta["in_channels"],
            image_size=meta["image_size"],
            base_channels=meta["base_channels"],
            channel_mults=tuple(meta["channel_mults"]),
            embed_dim=meta["embed_dim"],
            time_dim=meta["time_dim"],
            attn_dim=meta["attn_dim"],
            n_labels=meta["n_labels"],
            n_slots=meta["n_slots"],
        )
        model = cls(config)
        for (name, _), param in zip(model.state_arrays(), model._ordered_params()):
            param.data = arrays[name].copy()
        return model

    def _ordered_params(self):
        return [self.vocab.table, self.vocab.positional] + (
            self.t_mlp1.params()
            + self.t_mlp2.params()
            + self.conv_in.params()
            + [p for b in self.down_blocks for p in b.params()]
            + self.mid1.params()
            + self.attn.params()
            + self.mid2.params()
            + [p for b in self.up_blocks for p in b.params()]
            + self.conv_out.params()
        )


def denoiser_forward(model: DenoiserModel, z, t, cond=None) -> Tensor:
    return model.forward(T.as_tensor(z), t, cond)


class ReweightedDenoiser:
    """Scoped view of a denoiser with one attention column rescaled then rows renormalized."""

    def __init__(self, base: DenoiserModel, token_index: int, w: float):
        if w <= 0:
            raise ValueError(f"attention reweight scale must be positive, got {w}")
        self.base = base
        self.token_index = int(token_index)
        self.w = float(w)
        self.config = base.config
        self.vocab = base.vocab

    def forward(self, z, t, cond=None, null_mask=None, attn_sink=None) -> Tensor:
        reweight = None if self.w == 1.0 else (self.token_index, self.w)
        return self.base.forward(z, t, cond, null_mask=null_mask, reweight=reweight, attn_sink=attn_sink)

    def label_cond(self, class_id: int) -> np.ndarray:
        return self.base.label_cond(class_id)


def attention_reweight(model: DenoiserModel, token_index: int, w: float) -> ReweightedDenoiser:
    return ReweightedDenoiser(model, token_index, w)


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


class IdentityCodec:
    """Exact pass-through codec: pixel-space diffusion."""

    variant = "identity"

    def __init__(self, image_shape=(1, 16, 16)):
        self.image_shape = tuple(image_shape)

    def latent_shape(self) -> tuple:
        return self.image_shape

    def encode(self, x: Tensor) -> Tensor:
        return T.as_tensor(x)

    def decode(self, z: Tensor) -> Tensor:
        return T.as_tensor(z)

    def params(self):
        return []

    def meta_dict(self) -> dict:
        return {"kind": "codec", "variant": "identity", "image_shape": list(self.image_shape)}

    def state_arrays(self) -> list:
        return []

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "IdentityCodec":
        return cls(tuple(meta["image_shape"]))


class LearnedCodec:
    """Small convolutional autoencoder: C x H x W -> 4 x H/4 x W/4 and back."""

    variant = "learned-ae"

    def __init__(self, image_shape=(1, 16, 16), latent_channels: int = 4, hidden: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.image_shape = tuple(image_shape)
        self.latent_channels = latent_channels
        self.hidden = hidden
        cin = image_shape[0]
        self.enc1 = Conv2dLayer(cin, hidden, 3, stride=2, padding=1, rng=rng)
        self.enc2 = Conv2dLayer(hidden, latent_channels, 3, stride=2, padding=1, rng=rng)
        self.dec1 = ConvTranspose2dLayer(latent_channels, hidden, 4, stride=2, padding=1, rng=rng)
        self.dec2 = ConvTranspose2dLayer(hidden, cin, 4, stride=2, padding=1, rng=rng)

    def latent_shape(self) -> tuple:
        _, h, w = self.image_shape
        return (self.latent_channels, h // 4, w // 4)

    def encode(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1:] != self.image_shape:
            raise ShapeError(f"codec encode: expected {self.image_shape} images, got {x.shape}")
        return self.enc2(T.silu(self.enc1(x)))

    def decode(self, z: Tensor) -> Tensor:
        z = T.as_tensor(z)
        if z.shape[1:] != self.latent_shape():
            raise ShapeError(f"codec decode: expected {self.latent_shape()} latents, got {z.shape}")
        return T.ttanh(self.dec2(T.silu(self.dec1(z))))

    def params(self):
        return self.enc1.params() + self.enc2.params() + self.dec1.params() + self.dec2.params()

    def meta_dict(self) -> dict:
        return {
            "kind": "codec",
            "variant": "learned-ae",
            "image_shape": list(self.image_shape),
            "latent_channels": self.latent_channels,
            "hidden": self.hidden,
        }

    def state_arrays(self) -> list:
        names = ["enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias",
                 "dec1.weight", "dec1.bias", "dec2.weight", "dec2.bias"]
        return list(zip(names, [p.data for p in self.params()]))

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "LearnedCodec":
        model = cls(tuple(meta["image_shape"]), meta["latent_channels"], meta["hidden"])
        for (name, _), p in zip(model.state_arrays(), model.params()):
            p.data = arrays[name].copy()
        return model


def codec_from_meta(meta: dict, arrays: dict):
    if meta["variant"] == "identity":
        return IdentityCodec.from_state(meta, arrays)
    return LearnedCodec.from_state(meta, arrays)


def codec_encode(codec, image) -> Tensor:
    return codec.encode(T.as_tensor(image))


def codec_decode(codec, latent) -> Tensor:
    return codec.decode(T.as_tensor(latent))


# ---------------------------------------------------------------------------
# weight hashing
# ---------------------------------------------------------------------------


def weight_hash(model) -> str:
    """SHA-256 over the model's named state arrays; the frozen-weights witness."""
    digest = hashlib.sha256()
    for name, arr in model.state_arrays():
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()
