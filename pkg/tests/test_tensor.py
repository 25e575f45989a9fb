"""Gradient and tape semantics of the tensor core.

Every primitive is checked against central finite differences at 64-bit;
kink-bearing ops (relu, max pool, l2norm) get inputs nudged away from their
non-smooth sets so the difference quotient is valid.
"""

import numpy as np
import pytest

from ddis import tensor as T
from ddis.tensor import Graph, GraphError, NumericError, ShapeError, Tensor


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    x = x + np.sign(x) * margin
    x[x == 0] = margin
    return x


def spread_windows(rng, shape, k, margin=0.02):
    """Random array whose top-2 gap inside each kxk pooling window exceeds margin."""
    x = rng.standard_normal(shape)
    B, C, H, W = shape
    win = x.reshape(B, C, H // k, k, W // k, k)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
    order = np.argsort(flat, axis=-1)
    ranks = np.argsort(order, axis=-1)
    flat = flat + ranks * margin * 3  # strictly separate window entries
    win = flat.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(shape)


PRIMITIVE_CASES = [
    ("add", lambda x: T.tsum(T.add(x, 1.5)), lambda rng: rng.standard_normal((3, 4))),
    ("add_broadcast", lambda x: T.tsum(T.add(x, Tensor(np.arange(4.0)))), lambda rng: rng.standard_normal((3, 4))),
    ("sub", lambda x: T.tsum(T.sub(2.0, x)), lambda rng: rng.standard_normal((5,))),
    ("mul", lambda x: T.tsum(T.mul(x, x)), lambda rng: rng.standard_normal((2, 3))),
    ("div", lambda x: T.tsum(T.div(1.0, x)), lambda rng: away_from_zero(rng, (4,), 0.5)),
    ("neg", lambda x: T.tsum(T.neg(x)), lambda rng: rng.standard_normal((3,))),
    ("pow", lambda x: T.tsum(T.pow_scalar(x, 3.0)), lambda rng: away_from_zero(rng, (4,), 0.3)),
    ("exp", lambda x: T.tsum(T.texp(x)), lambda rng: rng.standard_normal((3, 2))),
    ("log", lambda x: T.tsum(T.tlog(x)), lambda rng: rng.random((4,)) + 0.5),
    ("sqrt", lambda x: T.tsum(T.tsqrt(x)), lambda rng: rng.random((4,)) + 0.5),
    ("tanh", lambda x: T.tsum(T.ttanh(x)), lambda rng: rng.standard_normal((3, 3))),
    ("relu", lambda x: T.tsum(T.relu(x)), lambda rng: away_from_zero(rng, (4, 4))),
    ("silu", lambda x: T.tsum(T.silu(x)), lambda rng: rng.standard_normal((5,))),
    ("sum_axis", lambda x: T.tsum(T.mul(T.tsum(x, axis=0), T.tsum(x, axis=0))), lambda rng: rng.standard_normal((3, 4))),
    ("mean", lambda x: T.tsum(T.texp(T.tmean(x, axis=1))), lambda rng: rng.standard_normal((2, 5))),
    ("variance", lambda x: T.tsum(T.variance(x, axis=(0, 2))), lambda rng: rng.standard_normal((2, 3, 4))),
    ("l2norm", lambda x: T.l2norm(x), lambda rng: away_from_zero(rng, (6,), 0.2)),
    ("reshape", lambda x: T.tsum(T.texp(T.reshape(x, (6,)))), lambda rng: rng.standard_normal((2, 3))),
    ("transpose", lambda x: T.tsum(T.mul(T.transpose(x, (1, 0)), 2.0)), lambda rng: rng.standard_normal((2, 3))),
    ("broadcast_to", lambda x: T.tsum(T.texp(T.broadcast_to(x, (4, 3)))), lambda rng: rng.standard_normal((1, 3))),
    ("concat", lambda x: T.tsum(T.texp(T.concat([x, T.mul(x, 2.0)], axis=1))), lambda rng: rng.standard_normal((2, 2))),
    ("take_rows", lambda x: T.tsum(T.texp(T.take_rows(x, np.array([0, 2, 2])))), lambda rng: rng.standard_normal((3, 4))),
    ("take_column", lambda x: T.tsum(T.texp(T.take_column(x, 1))), lambda rng: rng.standard_normal((3, 3))),
    ("softmax", lambda x: T.tsum(T.mul(T.softmax(x), Tensor(np.arange(4.0)))), lambda rng: rng.standard_normal((2, 4))),
    ("log_softmax", lambda x: T.tsum(T.mul(T.log_softmax(x), Tensor(np.arange(4.0)))), lambda rng: rng.standard_normal((2, 4))),
    ("matmul", lambda x: T.tsum(T.matmul(x, T.transpose(x, (1, 0)))), lambda rng: rng.standard_normal((3, 4))),
    ("matmul_batched", lambda x: T.tsum(T.matmul(x, Tensor(np.full((4, 2), 0.5)))), lambda rng: rng.standard_normal((2, 3, 4))),
    ("conv2d", lambda x: T.tsum(T.conv2d(x, Tensor(np.arange(18.0).reshape(2, 1, 3, 3) / 10), stride=1, padding=1)), lambda rng: rng.standard_normal((2, 1, 5, 5))),
    ("conv2d_stride", lambda x: T.tsum(T.texp(T.conv2d(x, Tensor(np.ones((1, 2, 2, 2)) / 4), stride=2, padding=0))), lambda rng: rng.standard_normal((1, 2, 4, 4))),
    ("conv2d_transpose", lambda x: T.tsum(T.conv2d_transpose(x, Tensor(np.arange(8.0).reshape(1, 2, 2, 2) / 8), stride=2, padding=0)), lambda rng: rng.standard_normal((1, 1, 3, 3))),
    ("conv2d_transpose_pad", lambda x: T.tsum(T.texp(T.conv2d_transpose(x, Tensor(np.ones((2, 1, 4, 4)) / 16), stride=2, padding=1))), lambda rng: rng.standard_normal((1, 2, 3, 3))),
    ("avg_pool2d", lambda x: T.tsum(T.texp(T.avg_pool2d(x, 2))), lambda rng: rng.standard_normal((1, 2, 4, 4))),
    ("max_pool2d", lambda x: T.tsum(T.texp(T.max_pool2d(x, 2))), lambda rng: spread_windows(rng, (1, 2, 4, 4), 2)),
    ("upsample_nearest", lambda x: T.tsum(T.texp(T.upsample_nearest(x, 2))), lambda rng: rng.standard_normal((1, 2, 3, 3))),
]


@pytest.mark.parametrize("name,fn,make", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
@pytest.mark.parametrize("seed", range(50))
def test_primitive_gradients_match_finite_differences(name, fn, make, seed):
    rng = np.random.default_rng(1000 + seed)
    x = Tensor(make(rng))
    err = T.finite_difference_check(fn, x, step=1e-5)
    assert err < 1e-5, f"{name}: max relative gradient error {err}"


def test_weight_gradients_of_conv_ops():
    rng = np.random.default_rng(7)
    x = np.asarray(rng.standard_normal((2, 2, 5, 5)))

    def conv_wrt_weight(w):
        return T.tsum(T.texp(T.conv2d(Tensor(x), w, stride=2, padding=1)))

    err = T.finite_difference_check(conv_wrt_weight, Tensor(rng.standard_normal((3, 2, 3, 3))), 1e-5)
    assert err < 1e-5

    xt = np.asarray(rng.standard_normal((2, 3, 4, 4)))

    def convt_wrt_weight(w):
        return T.tsum(T.texp(T.conv2d_transpose(Tensor(xt), w, stride=2, padding=1)))

    err = T.finite_difference_check(convt_wrt_weight, Tensor(rng.standard_normal((3, 2, 4, 4))), 1e-5)
    assert err < 1e-5


def test_add_elementwise_example():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_conv2d_ones_example():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_softmax_uniform_example():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.array_equal(out.data, np.full(3, 1.0 / 3.0))


def test_backward_square_example():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Graph() as g:
        y = T.tsum(T.mul(x, x))
        g.backward(y)
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean_example():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Graph() as g:
        g.backward(T.tmean(x))
    assert np.array_equal(x.grad, [0.25] * 4)


def test_backward_accumulates_without_reset():
    x = Tensor([2.0], requires_grad=True)
    with Graph() as g:
        y = T.tsum(T.mul(x, x))
        g.backward(y)
        g.backward(y)
    assert np.array_equal(x.grad, [8.0])


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = T.mul(x, x)
        with pytest.raises(GraphError, match="scalar"):
            g.backward(y)


def test_backward_rejects_detached_root():
    with pytest.raises(GraphError, match="detached"):
        T.backward(Tensor([1.0]))
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        with pytest.raises(GraphError, match="detached"):
            g.backward(T.tsum(Tensor([3.0])))  # constant: never recorded


def test_shape_errors_name_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_finite_difference_check_closed_form_exp():
    x = Tensor([0.0, 1.0])
    err = T.finite_difference_check(lambda t: T.tsum(T.texp(t)), x, 1e-5)
    assert err < 1e-6


def test_finite_difference_check_constant_fn():
    err = T.finite_difference_check(lambda t: T.tsum(Tensor([5.0])), Tensor([1.0, 2.0]), 1e-5)
    assert err == 0.0


def test_finite_difference_check_rejects_nan():
    def bad(t):
        return T.tsum(T.tlog(t))  # log of negative -> nan path

    with pytest.raises(NumericError):
        T.finite_difference_check(bad, Tensor([-1.0, -2.0]), 1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_forward_determinism(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))

    def run():
        return T.silu(T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)).data

    a, b = run(), run()
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_backward_linearity(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((5,))
    a, b = 2.5, -1.25

    def grad_of(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        with Graph() as g:
            g.backward(fn(x))
        return x.grad

    f = lambda x: T.tsum(T.texp(x))
    h = lambda x: T.tsum(T.mul(x, x))
    combined = lambda x: T.add(T.mul(f(x), a), T.mul(h(x), b))
    expected = a * grad_of(f) + b * grad_of(h)
    assert np.allclose(grad_of(combined), expected, rtol=1e-12, atol=1e-12)


def test_replay_reproduces_root_bit_exactly():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Graph() as g:
        y = T.tsum(T.softmax(T.matmul(x, T.transpose(x, (1, 0)))))
        replayed = g.replay_root(y)
    assert np.array_equal(replayed, y.data)


def test_no_recording_without_requires_grad():
    with Graph() as g:
        T.add(Tensor([1.0]), Tensor([2.0]))
    assert len(g) == 0


def test_no_recording_without_active_graph():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_nested_graphs_record_independently():
    x = Tensor([3.0], requires_grad=True)
    with Graph() as outer:
        a = T.mul(x, x)
        with Graph() as inner:
            b = T.mul(x, T.as_tensor(2.0))
            inner.backward(T.tsum(b))
        inner_grad = x.grad.copy()
        x.zero_grad()
        outer.backward(T.tsum(a))
    assert np.array_equal(inner_grad, [2.0])
    assert np.array_equal(x.grad, [6.0])


def test_independent_graphs_across_threads():
    import concurrent.futures

    def job(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((8,)), requires_grad=True)
        with Graph() as g:
            g.backward(T.tsum(T.mul(x, x)))
        return np.allclose(x.grad, 2 * x.data)

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        assert all(pool.map(job, range(8)))


def test_float32_mode_preserves_dtype():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    y = T.mul(T.add(x, x), 0.5)
    assert y.dtype == np.float32
