import numpy as np
import pytest

from fundusnet import tensor as T
from fundusnet.tensor import Tensor

from oracles import central_difference, gradcheck, leaf64, max_rel_error, naive_conv2d

GRAD_TOL = 1e-3


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(1).random((2, 1, 5, 5), dtype=np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_output_extent():
    x = Tensor(np.zeros((1, 2, 9, 7)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    out = T.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize(
    "shape,wshape,stride,padding,groups",
    [
        ((2, 4, 8, 8), (8, 4, 3, 3), 2, 1, 1),
        ((2, 3, 7, 6), (5, 3, 1, 1), 1, 0, 1),
        ((1, 4, 9, 9), (6, 2, 3, 3), 1, 1, 2),
        ((2, 8, 16, 16), (8, 8, 5, 5), 2, 2, 1),
        ((2, 6, 5, 5), (6, 1, 3, 3), 1, 1, 6),
    ],
)
def test_conv_matches_naive_loops(shape, wshape, stride, padding, groups):
    rng = np.random.default_rng(2)
    x = rng.normal(size=shape).astype(np.float32)
    w = rng.normal(size=wshape).astype(np.float32)
    b = rng.normal(size=wshape[0]).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, padding, groups), rtol=0, atol=1e-5 * np.sqrt(np.prod(wshape[1:])))


def test_depthwise_equals_grouped_conv_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 11, 11)).astype(np.float32)
    w = rng.normal(size=(5, 1, 5, 5)).astype(np.float32)
    a = T.depthwise_conv2d(Tensor(x), Tensor(w), stride=2, padding=2).data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=2, groups=5).data
    assert np.array_equal(a, b)


def test_depthwise_single_channel_equals_plain_conv():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 1, 9, 9)).astype(np.float32)
    w = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    a = T.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_conv_shape_errors():
    with pytest.raises(T.ShapeError, match="groups"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))), groups=2)
    with pytest.raises(T.ShapeError, match="input channels"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(T.ShapeError):
        T.depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))))


def test_activation_values():
    assert T.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    assert T.silu(Tensor(np.zeros(1))).data[0] == 0.0
    x = np.linspace(-6, 6, 13)
    np.testing.assert_allclose(T.silu(Tensor(x)).data, x / (1 + np.exp(-x)), rtol=1e-12)


def test_global_avg_pool_mean():
    out = T.global_avg_pool(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 2.5


def test_batch_norm_constant_channel_gives_beta():
    x = np.broadcast_to(np.array([3.0, -1.0])[None, :, None, None], (4, 2, 3, 3)).copy()
    beta = np.array([0.5, -0.25])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-6)


def test_batch_norm_eval_identity():
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False, eps=0.0)
    np.testing.assert_array_equal(out.data, x)


def test_batch_norm_updates_running_stats():
    rng = np.random.default_rng(6)
    x = rng.normal(2.0, 3.0, size=(8, 2, 5, 5))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_channel_mismatch():
    with pytest.raises(T.ShapeError, match="gamma"):
        T.batch_norm(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)


def test_non_finite_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.mul(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_broadcast_patterns_are_restricted():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_grad_of_weighted_sum_is_input():
    x = np.array([1.5, -2.0, 3.0])
    w = leaf64(np.array([0.1, 0.2, 0.3]))
    T.backward(T.sum(T.mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)


def test_gradients_accumulate_until_zeroed():
    w = leaf64(np.array([1.0, 2.0]))
    x = Tensor(np.array([3.0, 4.0]))
    T.backward(T.sum(T.mul(w, x)))
    T.backward(T.sum(T.mul(w, x)))
    np.testing.assert_array_equal(w.grad, 2 * x.data)
    w.zero_grad()
    T.backward(T.sum(T.mul(w, x)))
    np.testing.assert_array_equal(w.grad, x.data)


def test_constant_has_zero_gradient():
    w = leaf64(np.array([1.0, 2.0]))
    unused = T.sum(T.mul(w, Tensor(np.zeros(2))))
    T.backward(unused)
    np.testing.assert_array_equal(w.grad, np.zeros(2))


def test_backward_rejects_non_scalar():
    w = leaf64(np.ones(3))
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(T.mul(w, Tensor(np.ones(3))))


def test_backward_runs_in_reverse_forward_order():
    seen = []
    w = leaf64(np.ones(2))
    a = T.mul(w, Tensor(np.full(2, 2.0)))
    b = T.mul(a, Tensor(np.full(2, 3.0)))
    c = T.add(b, a)
    for t in (a, b, c):
        inner = t._backward
        t._backward = lambda g, inner=inner, t=t: (seen.append(t._seq), inner(g))[1]
    T.backward(T.sum(c))
    assert seen == sorted(seen, reverse=True)
    np.testing.assert_array_equal(w.grad, np.full(2, 8.0))


def test_linear_sigmoid_bce_chain_gradcheck():
    from fundusnet.train import bce_loss

    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 4))
    y = np.array([0, 1, 1, 0, 1, 0])
    w0, b0 = rng.normal(size=(1, 4)), rng.normal(size=1)
    w, b = leaf64(w0), leaf64(b0)
    T.backward(bce_loss(T.linear(Tensor(x), w, b), y))

    def f():
        z = x @ w.data.T + b.data
        p = 1 / (1 + np.exp(-z[:, 0]))
        return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())

    gw, gb = central_difference(f, [w.data, b.data])
    assert max_rel_error(w.grad, gw) < GRAD_TOL
    assert max_rel_error(b.grad, gb) < GRAD_TOL


SHAPES = [(2, 3, 5, 5), (1, 2, 4, 6), (3, 4, 3, 3), (2, 1, 6, 4), (2, 5, 4, 4)]


@pytest.mark.parametrize("idx", range(5))
def test_conv2d_gradcheck(idx):
    rng = np.random.default_rng(100 + idx)
    n, c, h, w = SHAPES[idx]
    k = [1, 3, 3, 2, 3][idx]
    stride = [1, 2, 1, 1, 2][idx]
    x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(3, c, k, k)), rng.normal(size=3)
    err = gradcheck(lambda x, wt, b: T.conv2d(x, wt, b, stride=stride, padding=k // 2), [x, wt, b], seed=idx)
    assert err < GRAD_TOL


@pytest.mark.parametrize("idx", range(5))
def test_depthwise_gradcheck(idx):
    rng = np.random.default_rng(200 + idx)
    n, c, h, w = SHAPES[idx]
    k = [3, 5, 3, 3, 1][idx]
    stride = [1, 2, 2, 1, 1][idx]
    x, wt = rng.normal(size=(n, c, h, w)), rng.normal(size=(c, 1, k, k))
    assert gradcheck(lambda x, wt: T.depthwise_conv2d(x, wt, stride=stride, padding=k // 2), [x, wt], seed=idx) < GRAD_TOL


@pytest.mark.parametrize("idx", range(5))
def test_grouped_conv_gradcheck(idx):
    rng = np.random.default_rng(250 + idx)
    n, _, h, w = SHAPES[idx]
    x, wt = rng.normal(size=(n, 4, h, w)), rng.normal(size=(6, 2, 3, 3))
    assert gradcheck(lambda x, wt: T.conv2d(x, wt, stride=1, padding=1, groups=2), [x, wt], seed=idx) < GRAD_TOL


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("idx", range(5))
def test_batch_norm_gradcheck(idx, training):
    rng = np.random.default_rng(300 + idx)
    n, c, h, w = SHAPES[idx]
    x = rng.normal(1.0, 2.0, size=(n, c, h, w))
    g, b = rng.normal(size=c), rng.normal(size=c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)

    def op(x, g, b):
        return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)

    assert gradcheck(op, [x, g, b], seed=idx) < GRAD_TOL


@pytest.mark.parametrize(
    "name,op",
    [
        ("silu", T.silu),
        ("sigmoid", T.sigmoid),
        ("pool", T.global_avg_pool),
        ("mean", lambda x: T.mean(x)),
        ("flatten", T.flatten),
    ],
)
@pytest.mark.parametrize("idx", range(5))
def test_unary_gradcheck(name, op, idx):
    x = np.random.default_rng(400 + idx).normal(size=SHAPES[idx])
    assert gradcheck(op, [x], seed=idx) < GRAD_TOL


@pytest.mark.parametrize("idx", range(5))
def test_binary_gradcheck(idx):
    rng = np.random.default_rng(500 + idx)
    n, c, h, w = SHAPES[idx]
    x, y = rng.normal(size=(n, c, h, w)), rng.normal(size=(n, c, h, w))
    gate = rng.normal(size=(n, c, 1, 1))
    assert gradcheck(T.add, [x, y], seed=idx) < GRAD_TOL
    assert gradcheck(T.mul, [x, y], seed=idx) < GRAD_TOL
    assert gradcheck(T.mul, [x, gate], seed=idx) < GRAD_TOL


@pytest.mark.parametrize("idx", range(5))
def test_linear_gradcheck(idx):
    rng = np.random.default_rng(600 + idx)
    n, f, o = idx + 1, 3 + idx, 2 + idx % 2
    x, w, b = rng.normal(size=(n, f)), rng.normal(size=(o, f)), rng.normal(size=o)
    assert gradcheck(T.linear, [x, w, b], seed=idx) < GRAD_TOL


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 6, 12, 12)).astype(np.float32)
    w = rng.normal(size=(6, 1, 3, 3)).astype(np.float32)
    w2 = rng.normal(size=(5, 6, 3, 3)).astype(np.float32)

    def run():
        xt = Tensor(x, requires_grad=True)
        h = T.silu(T.conv2d(xt, Tensor(w), stride=2, padding=1, groups=6))
        h = T.batch_norm(h, Tensor(np.ones(6)), Tensor(np.zeros(6)), np.zeros(6, np.float32), np.ones(6, np.float32), True)
        out = T.mean(T.conv2d(h, Tensor(w2), padding=1))
        T.backward(out)
        return out.data.copy(), xt.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
