"""Dense float tensors with reverse-mode differentiation.

Only the operations the MBConv classifier family needs are provided:
grouped/depthwise convolution, batch normalization, SiLU/sigmoid, global
average pooling, a linear layer and a few elementwise and reduction ops.

Every op result records its parents and a backward closure.  Results are
stamped with a global sequence number so that ``backward`` can replay the
recorded ops in exactly the reverse of their forward order.

Compute runs in float32.  Passing float64 arrays keeps everything in float64,
which is what the finite-difference gradient checks use.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` are trainable parameters;
    their ``grad`` accumulates additively across ``backward`` calls until
    ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = -1
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def make_op(name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it in the graph.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    array (or None) per parent, in order.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out._op = name
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> dict:
    """Back-propagate from a scalar ``loss``.

    Gradients are added into the ``grad`` slot of every reachable leaf that
    requires grad.  Returns a map from those leaves to their accumulated
    gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    # collect the recorded ops reachable from the loss
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._backward is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                leaves[id(parent)] = parent
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return {leaf: leaf.grad for leaf in leaves.values()}


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.size == 1:
        return
    # per-channel gate / affine: (N, C, 1, 1) or (1, C, 1, 1) against (N, C, H, W)
    if a.data.ndim == 4 and b.data.ndim == 4:
        n, c = b.shape[:2]
        if b.shape[2:] == (1, 1) and c == a.shape[1] and n in (1, a.shape[0]):
            return
    raise ShapeError(f"{op}: unsupported operand shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a per-channel (·, C, 1, 1) tensor."""
    _check_broadcast(a, b, "add")

    def bw(g):
        return g, _reduce_to(g, b.shape)

    return make_op("add", a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a scalar or a per-channel (·, C, 1, 1) tensor."""
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("mul", ad * bd, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def bw(g):
        return (g * s * (1 - s),)

    return make_op("sigmoid", s, (x,), bw)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = np.ascontiguousarray(x.data)
    s = expit(xd)
    out = xd * s

    def bw(g):
        return (_kernels.silu_backward(np.ascontiguousarray(g), xd, s),)

    return make_op("silu", out, (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array reduction name
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_op("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return make_op("reshape", x.data.reshape(shape), (x,), bw)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to(g / area, x.shape).copy(),)

    return make_op("global_avg_pool", x.data.mean(axis=(2, 3), keepdims=True), (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with x (N, F), weight (O, F), bias (O,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op("linear", out, parents, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, s: int) -> np.ndarray:
    return xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]


def _dense_forward(x, w, stride, padding):
    """groups=1 convolution via an explicit column buffer and one matmul per sample."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(wd, kw, stride, padding)
    if kh == 1 and kw == 1 and padding == 0:
        cols = x[:, :, ::stride, ::stride] if stride > 1 else x
        cols = np.ascontiguousarray(cols).reshape(n, c, ho * wo)
    else:
        xp = _pad(x, padding)
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, ho, wo, stride)
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(co, -1), cols).reshape(n, co, ho, wo)
    return out, cols


def _dense_backward(g, x_shape, w, cols, stride, padding, need_x, need_w):
    n, c, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g2 = g.reshape(n, co, ho * wo)
    gw = None
    if need_w:
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape).astype(w.dtype, copy=False)
    gx = None
    if need_x:
        dcols = np.matmul(w.reshape(co, -1).T, g2)
        if kh == 1 and kw == 1 and padding == 0:
            if stride == 1:
                gx = dcols.reshape(x_shape)
            else:
                gx = np.zeros(x_shape, dtype=g.dtype)
                gx[:, :, ::stride, ::stride] = dcols.reshape(n, c, ho, wo)
        else:
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    _window(gxp, i, j, ho, wo, stride)[...] += dcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
    return gx, gw


def _depthwise_forward(x, w, stride, padding):
    _, _, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(wd, kw, stride, padding)
    xp = np.ascontiguousarray(_pad(x, padding))
    return _kernels.depthwise_forward(xp, np.ascontiguousarray(w), stride, ho, wo), xp


def _depthwise_backward(g, x_shape, w, xp, stride, padding, need_x, need_w):
    _, _, h, wd = x_shape
    g = np.ascontiguousarray(g)
    gw = _kernels.depthwise_grad_weight(g, xp, w.shape[2], w.shape[3], stride) if need_w else None
    gx = None
    if need_x:
        gxp = _kernels.depthwise_grad_input(g, np.ascontiguousarray(w), xp.shape, stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
    return gx, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) over an NCHW batch.

    ``weight`` has shape (Cout, Cin // groups, Kh, Kw).  When ``groups`` equals
    Cin and Cout the depthwise kernel is used.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, wd = x.shape
    co, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"conv2d: bad stride={stride} padding={padding} groups={groups}")
    if c % groups or co % groups:
        raise ShapeError(f"conv2d: channels in={c} out={co} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight expects {cg * groups} input channels, input has {c}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {co} output channels")

    xd, wd_ = x.data, weight.data
    if groups == 1:
        out, saved = _dense_forward(xd, wd_, stride, padding)
        kind = "dense"
    elif groups == c and co == c:
        out, saved = _depthwise_forward(xd, wd_, stride, padding)
        kind = "depthwise"
    else:
        cin_g, cout_g = c // groups, co // groups
        parts = [
            _dense_forward(xd[:, gi * cin_g : (gi + 1) * cin_g], wd_[gi * cout_g : (gi + 1) * cout_g], stride, padding)
            for gi in range(groups)
        ]
        out = np.concatenate([p[0] for p in parts], axis=1)
        saved = [p[1] for p in parts]
        kind = "grouped"
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        need_x, need_w = x.requires_grad, weight.requires_grad
        if kind == "dense":
            gx, gw = _dense_backward(g, x.shape, wd_, saved, stride, padding, need_x, need_w)
        elif kind == "depthwise":
            gx, gw = _depthwise_backward(g, x.shape, wd_, saved, stride, padding, need_x, need_w)
        else:
            cin_g, cout_g = c // groups, co // groups
            gxs, gws = [], []
            for gi in range(groups):
                gx_i, gw_i = _dense_backward(
                    g[:, gi * cout_g : (gi + 1) * cout_g],
                    (n, cin_g, h, wd),
                    wd_[gi * cout_g : (gi + 1) * cout_g],
                    saved[gi],
                    stride,
                    padding,
                    need_x,
                    need_w,
                )
                gxs.append(gx_i)
                gws.append(gw_i)
            gx = np.concatenate(gxs, axis=1) if need_x else None
            gw = np.concatenate(gws, axis=0) if need_w else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is (C, 1, Kh, Kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    c = x.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} incompatible with {c} input channels")
    return conv2d(x, weight, None, stride=stride, padding=padding, groups=c)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an NCHW batch.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).  In eval mode the running statistics are used.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {arr.shape}, expected ({c},)")
    xd = np.ascontiguousarray(x.data)
    dt = xd.dtype
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu, var = _kernels.channel_stats(xd)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    mu = mu.astype(dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    gd = gamma.data
    xhat, out = _kernels.bn_apply(xd, mu, inv_std, gd, beta.data)

    def bw(g):
        gx, ggamma, gbeta = _kernels.bn_backward(np.ascontiguousarray(g), xhat, gd, inv_std, training)
        return (
            gx if x.requires_grad else None,
            ggamma if gamma.requires_grad else None,
            gbeta if beta.requires_grad else None,
        )

    return make_op("batch_norm", out, (x, gamma, beta), bw)
