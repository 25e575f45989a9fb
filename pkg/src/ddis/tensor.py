"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (networks, samplers, guidance losses) is built from the
primitives in this module. Ops are recorded on the innermost active ``Graph``
whenever an input carries ``requires_grad``; without an active graph, tensors
are plain immutable values. Graphs are single-threaded contexts (the graph
stack is thread-local), so batch-parallel work must use independent graphs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_SAFE_NORM_FLOOR = 1e-30  # subgradient guard for the L2 norm at the origin


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's rule."""


class GraphError(RuntimeError):
    """A backward or replay request the recorded tape cannot satisfy."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


_TLS = threading.local()


def _graph_stack() -> list:
    stack = getattr(_TLS, "graphs", None)
    if stack is None:
        stack = []
        _TLS.graphs = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


@dataclass
class OpRecord:
    name: str
    inputs: tuple
    output: "Tensor"
    fwd: Callable
    bwd: Callable


class Graph:
    """Tape of primitive ops in execution order (which is topological).

    Leaf tensors must not be mutated while the graph is alive; the replay
    invariant (re-running the tape reproduces the root bit-exactly) depends
    on it.
    """

    def __init__(self):
        self._records: list[OpRecord] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _graph_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, rec: OpRecord) -> None:
        self._produced[id(rec.output)] = len(self._records)
        self._records.append(rec)

    def backward(self, root: "Tensor") -> None:
        """Accumulate gradients of ``root`` into every reachable leaf's .grad.

        Repeated calls accumulate; callers reset leaf grads between steps.
        """
        if root.data.size != 1:
            raise GraphError(
                f"backward root must be scalar, got shape {root.shape}"
            )
        root_idx = self._produced.get(id(root))
        if root_idx is None:
            raise GraphError("backward root was not produced on this graph (detached root)")

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        for rec in reversed(self._records[: root_idx + 1]):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            holders.pop(id(rec.output), None)
            arrays = [t.data for t in rec.inputs]
            in_grads = rec.bwd(g_out, arrays, rec.output.data)
            for t, g_in in zip(rec.inputs, in_grads):
                if g_in is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    holders[key] = t
        # Whatever survives the walk was never produced by a record: leaves.
        for key, g in grads.items():
            leaf = holders[key]
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad = leaf.grad + np.reshape(g, leaf.data.shape)

    def replay_root(self, root: "Tensor") -> np.ndarray:
        """Re-run the recorded forward closures; returns the recomputed root."""
        root_idx = self._produced.get(id(root))
        if root_idx is None:
            raise GraphError("replay root was not produced on this graph")
        values: dict[int, np.ndarray] = {}

        def current(t: "Tensor") -> np.ndarray:
            return values.get(id(t), t.data)

        for rec in self._records[: root_idx + 1]:
            values[id(rec.output)] = rec.fwd(*[current(t) for t in rec.inputs])
        return values[id(root)]


class Tensor:
    """N-d float array, optionally participating in the active gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple:
    """Coerce a binary op's operands, giving bare python scalars the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _apply(name: str, fwd: Callable, bwd: Callable, *inputs: Tensor) -> Tensor:
    arrays = [t.data for t in inputs]
    out_data = fwd(*arrays)
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        graph._record(OpRecord(name, tuple(inputs), out, fwd, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.data, b.data)
    return _apply(
        "add",
        lambda x, y: x + y,
        lambda g, ins, out: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.data, b.data)
    return _apply(
        "sub",
        lambda x, y: x - y,
        lambda g, ins, out: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.data, b.data)
    return _apply(
        "mul",
        lambda x, y: x * y,
        lambda g, ins, out: (
            _unbroadcast(g * ins[1], ins[0].shape),
            _unbroadcast(g * ins[0], ins[1].shape),
        ),
        a,
        b,
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a.data, b.data)
    return _apply(
        "div",
        lambda x, y: x / y,
        lambda g, ins, out: (
            _unbroadcast(g / ins[1], ins[0].shape),
            _unbroadcast(-g * ins[0] / (ins[1] * ins[1]), ins[1].shape),
        ),
        a,
        b,
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", lambda x: -x, lambda g, ins, out: (-g,), a)


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _apply(
        "pow",
        lambda x: x**p,
        lambda g, ins, out: (g * p * ins[0] ** (p - 1.0),),
        a,
    )


def texp(a) -> Tensor:
    a = as_tensor(a)
    return _apply("exp", np.exp, lambda g, ins, out: (g * out,), a)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _apply("log", np.log, lambda g, ins, out: (g / ins[0],), a)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    return _apply("sqrt", np.sqrt, lambda g, ins, out: (g * 0.5 / out,), a)


def ttanh(a) -> Tensor:
    a = as_tensor(a)
    return _apply("tanh", np.tanh, lambda g, ins, out: (g * (1.0 - out * out),), a)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _apply(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda g, ins, out: (g * (ins[0] > 0),),
        a,
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clip with pass-through gradient inside the interval."""
    a = as_tensor(a)
    lo, hi = float(lo), float(hi)
    return _apply(
        "clip",
        lambda x: np.clip(x, lo, hi),
        lambda g, ins, out: (g * ((ins[0] >= lo) & (ins[0] <= hi)),),
        a,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x still yields the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, ins, out):
        s = _sigmoid(ins[0])
        return (g * s * (1.0 + ins[0] * (1.0 - s)),)

    return _apply("silu", lambda x: x * _sigmoid(x), bwd, a)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)

    def bwd(g, ins, out):
        g_full = g if keepdims or not ax else np.expand_dims(g, ax)
        return (np.broadcast_to(g_full, ins[0].shape),)

    return _apply("sum", lambda x: np.sum(x, axis=ax, keepdims=keepdims), bwd, a)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1

    def bwd(g, ins, out):
        g_full = g if keepdims or not ax else np.expand_dims(g, ax)
        return (np.broadcast_to(g_full, ins[0].shape) / count,)

    return _apply("mean", lambda x: np.mean(x, axis=ax, keepdims=keepdims), bwd, a)


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (population) variance; matches the batch-norm reduction."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1

    def bwd(g, ins, out):
        x = ins[0]
        mu = np.mean(x, axis=ax, keepdims=True)
        g_full = g if keepdims or not ax else np.expand_dims(g, ax)
        return (np.broadcast_to(g_full, x.shape) * 2.0 * (x - mu) / count,)

    return _apply("variance", lambda x: np.var(x, axis=ax, keepdims=keepdims), bwd, a)


def l2norm(a) -> Tensor:
    """Euclidean norm over all elements (scalar output, unsquared).

    Gradient at the origin uses the zero subgradient.
    """
    a = as_tensor(a)

    def bwd(g, ins, out):
        n = float(out)
        if n <= _SAFE_NORM_FLOOR:
            return (np.zeros_like(ins[0]),)
        return (g * ins[0] / n,)

    return _apply("l2norm", lambda x: np.sqrt(np.sum(x * x)), bwd, a)


# ---------------------------------------------------------------------------
# shape / indexing primitives
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda x: np.reshape(x, shape),
        lambda g, ins, out: (np.reshape(g, ins[0].shape),),
        a,
    )


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda g, ins, out: (np.transpose(g, inv),),
        a,
    )


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    return _apply(
        "broadcast_to",
        lambda x: np.broadcast_to(x, shape).copy(),
        lambda g, ins, out: (_unbroadcast(g, ins[0].shape),),
        a,
    )


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ins, out):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(ins))
        )

    return _apply("concat", lambda *xs: np.concatenate(xs, axis=axis), bwd, *tensors)


def take_rows(table, ids) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"take_rows: ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")

    def bwd(g, ins, out):
        gt = np.zeros_like(ins[0])
        np.add.at(gt, ids, g)
        return (gt,)

    return _apply("take_rows", lambda x: x[ids], bwd, table)


def take_column(a, index: int) -> Tensor:
    """Select one column of a 2-d tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_column: expected 2-d input, got shape {a.shape}")
    if not (0 <= index < a.shape[1]):
        raise IndexError(f"take_column: column {index} out of range for shape {a.shape}")

    def bwd(g, ins, out):
        gx = np.zeros_like(ins[0])
        gx[:, index] = g
        return (gx,)

    return _apply("take_column", lambda x: x[:, index].copy(), bwd, a)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def fwd(x):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g, ins, out):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", fwd, bwd, a)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def fwd(x):
        z = x - np.max(x, axis=axis, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def bwd(g, ins, out):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _apply("log_softmax", fwd, bwd, a)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")

    def bwd(g, ins, out):
        x, y = ins
        gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return (gx, gy)

    return _apply("matmul", lambda x, y: x @ y, bwd, a, b)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW)
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Strided view [B, C, kh, kw, OH, OW] over an already padded input."""
    B, C, H, W = x.shape
    OH = (H - kh) // sh + 1
    OW = (W - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (B, C, kh, kw, OH, OW), (s0, s1, s2, s3, s2 * sh, s3 * sw)
    )


def _fold_windows(dcols: np.ndarray, padded_shape, kh, kw, sh, sw) -> np.ndarray:
    """Adjoint of _windows: scatter-add [B,C,kh,kw,OH,OW] back to the padded grid."""
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    OH, OW = dcols.shape[-2:]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * OH : sh, j : j + sw * OW : sw] += dcols[:, :, i, j]
    return out


def _colmat(x: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """Flattened windows of an already padded input: [B*OH*OW, C*kh*kw]."""
    cols = _windows(x, kh, kw, s, s)
    B, C, _, _, OH, OW = cols.shape
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * OH * OW, C * kh * kw)


def conv2d(x, w, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-d cross-correlation, input [B,Cin,H,W], kernel [Cout,Cin,kh,kw].

    The forward pass caches its flattened window matrix for the backward
    pass; a replay refreshes the cache, so tape replays stay consistent. An
    optional per-output-channel bias is fused into the matrix product.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    s, p = int(stride), int(padding)
    if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cache: dict = {}
    with_bias = bias is not None
    inputs = (x, w, as_tensor(bias)) if with_bias else (x, w)

    def fwd(xv, wv, bv=None):
        xp = _pad_hw(xv, p)
        mat = _colmat(xp, kh, kw, s)
        cache["colmat"] = mat
        cache["padded_shape"] = xp.shape
        B = xv.shape[0]
        OH = (xp.shape[2] - kh) // s + 1
        OW = (xp.shape[3] - kw) // s + 1
        out = mat @ wv.reshape(wv.shape[0], -1).T
        if bv is not None:
            out += bv
        return np.ascontiguousarray(out.reshape(B, OH, OW, wv.shape[0]).transpose(0, 3, 1, 2))

    def bwd(g, ins, out):
        xv, wv = ins[0], ins[1]
        B, Cout, OH, OW = g.shape
        colmat = cache["colmat"]
        padded_shape = cache["padded_shape"]
        gmat = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, Cout)
        gw = (gmat.T @ colmat).reshape(wv.shape)
        if s == 1:
            # backward-input is itself a correlation with the flipped kernel
            gp = _pad_hw(g, kh - 1)
            gcols = _colmat(gp, kh, kw, 1)
            wflip = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gxp = gcols @ wflip.reshape(wflip.shape[0], -1).T
            Hp, Wp = padded_shape[2], padded_shape[3]
            gxp = gxp.reshape(B, Hp, Wp, xv.shape[1]).transpose(0, 3, 1, 2)
        else:
            dcols = (gmat @ wv.reshape(Cout, -1)).reshape(B, OH, OW, xv.shape[1], kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            gxp = _fold_windows(dcols, padded_shape, kh, kw, s, s)
        gx = gxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p] if p else gxp
        gx = np.ascontiguousarray(gx)
        if with_bias:
            return (gx, gw, gmat.sum(axis=0))
        return (gx, gw)

    return _apply("conv2d", fwd, bwd, *inputs)


def conv2d_transpose(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution, input [B,Cin,H,W], kernel [Cin,Cout,kh,kw].

    Output spatial size is (H-1)*stride + kh - 2*padding; the op is the exact
    adjoint of conv2d with the same stride/padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose: expected 4-d input and kernel, got {x.shape}, {w.shape}"
        )
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv2d_transpose: channel mismatch between input {x.shape} and kernel {w.shape}"
        )
    kh, kw = w.shape[2], w.shape[3]
    s, p = int(stride), int(padding)
    out_h = (x.shape[2] - 1) * s + kh - 2 * p
    out_w = (x.shape[3] - 1) * s + kw - 2 * p
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_transpose: output size {out_h}x{out_w} is empty")

    def fwd(xv, wv):
        B, Cin, H, W = xv.shape
        Cout = wv.shape[1]
        # dcols[b,o,i,j,h,w] = sum_c x[b,c,h,w] * w[c,o,i,j]
        dcols = np.tensordot(xv, wv, axes=([1], [0]))  # [B,H,W,Cout,kh,kw]
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        full = _fold_windows(dcols, (B, Cout, (H - 1) * s + kh, (W - 1) * s + kw), kh, kw, s, s)
        return full[:, :, p : full.shape[2] - p, p : full.shape[3] - p] if p else full

    def bwd(g, ins, out):
        xv, wv = ins
        B, Cin, H, W = xv.shape
        gp = _pad_hw(g, p)
        gwin = _windows(gp, kh, kw, s, s)  # [B,Cout,kh,kw,H,W]
        gx = np.tensordot(gwin, wv, axes=([1, 2, 3], [1, 2, 3]))  # [B,H,W,Cin]
        gx = gx.transpose(0, 3, 1, 2)
        gw = np.tensordot(xv, gwin, axes=([0, 2, 3], [0, 4, 5]))  # [Cin,Cout,kh,kw]
        return (gx, gw)

    return _apply("conv2d_transpose", fwd, bwd, x, w)


def avg_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    k = int(k)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avg_pool2d: input {x.shape} not divisible by window {k}")

    def fwd(xv):
        B, C, H, W = xv.shape
        return xv.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bwd(g, ins, out):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _apply("avg_pool2d", fwd, bwd, x)


def max_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    k = int(k)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"max_pool2d: input {x.shape} not divisible by window {k}")

    def fwd(xv):
        B, C, H, W = xv.shape
        return xv.reshape(B, C, H // k, k, W // k, k).max(axis=(3, 5))

    def bwd(g, ins, out):
        xv = ins[0]
        B, C, H, W = xv.shape
        win = xv.reshape(B, C, H // k, k, W // k, k)
        mx = out.reshape(B, C, H // k, 1, W // k, 1)
        mask = (win == mx).astype(xv.dtype)
        mask /= mask.sum(axis=(3, 5), keepdims=True)  # split ties evenly
        gx = mask * g.reshape(B, C, H // k, 1, W // k, 1)
        return (gx.reshape(B, C, H, W),)

    return _apply("max_pool2d", fwd, bwd, x)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-d input, got {x.shape}")

    def bwd(g, ins, out):
        B, C, H, W = ins[0].shape
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    return _apply(
        "upsample_nearest",
        lambda xv: np.repeat(np.repeat(xv, f, axis=2), f, axis=3),
        bwd,
        x,
    )


# ---------------------------------------------------------------------------
# backward entry points and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root on the active graph."""
    graph = active_graph()
    if graph is None:
        raise GraphError("backward called with no active graph (detached root)")
    graph.backward(root)


def finite_difference_check(fn: Callable[[Tensor], Tensor], at: Tensor, step: float) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` must be pure and deterministic; raises NumericError on NaN in either
    gradient.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    base = np.array(at.data, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        out = fn(leaf)
        if out.size != 1:
            raise ShapeError(f"finite_difference_check: fn must return a scalar, got {out.shape}")
        if out.requires_grad:  # a constant fn never reaches the leaf
            g.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)

    if np.isnan(analytic).any() or np.isnan(numeric).any():
        raise NumericError("finite_difference_check: NaN encountered in a gradient")
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
