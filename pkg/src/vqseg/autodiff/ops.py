"""Differentiable primitives.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` = no flow).
Reductions and normalisation statistics accumulate in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, DimensionError
from .tensor import DTYPE, Tensor, as_tensor, make_output

F64 = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=F64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=F64)
    return grad.astype(DTYPE, copy=False)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_output(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_output(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = DTYPE(b)
        a = as_tensor(a)
        return make_output(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    a = as_tensor(a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_output(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return make_output(ad / bd, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_output(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_output(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_output(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_output(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = expit(xd)
    y = xd * s

    def bw(g):
        return (g * (s + y * (1.0 - s)),)

    return make_output(y, (x,), bw, "swish")


# ---------------------------------------------------------------- reductions / shape
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    y = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=F64)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return make_output(np.asarray(y, dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    y = np.mean(x.data, axis=axes, keepdims=keepdims, dtype=F64)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / DTYPE(count), shape).astype(DTYPE),)

    return make_output(np.asarray(y, dtype=DTYPE), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_output(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return make_output(y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_output(y, tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape} are incompatible (axis 1 of a vs axis 0 of b)")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return make_output(ad @ bd, (a, b), bw, "matmul")


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather ``table[indices]``; the gradient scatters back onto the rows used."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        out = np.zeros(table.shape, dtype=F64)
        np.add.at(out, idx, g)
        return (out.astype(DTYPE),)

    return make_output(table.data[idx], (table,), bw, "take_rows")


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward, no gradient backward."""
    return Tensor(x.data)


def straight_through(encoder_out: Tensor, quantised: Tensor) -> Tensor:
    """Forward value of ``quantised``; the output gradient is copied onto ``encoder_out``."""
    if encoder_out.shape != quantised.shape:
        raise DimensionError(
            f"straight_through needs equal shapes, got {encoder_out.shape} and {quantised.shape}"
        )
    q = quantised.data
    zeros = None

    def bw(g):
        nonlocal zeros
        if zeros is None:
            zeros = np.zeros_like(q)
        return g, zeros

    return make_output(q.copy(), (encoder_out, quantised), bw, "straight_through")


# ---------------------------------------------------------------- softmax family
def softmax(x: Tensor, axis: int = 1) -> Tensor:
    xd = x.data.astype(F64)
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        gs = g * s
        return ((gs - s * gs.sum(axis=axis, keepdims=True)).astype(DTYPE),)

    return make_output(s.astype(DTYPE), (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    xd = x.data.astype(F64)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def bw(g):
        return ((g - s * g.sum(axis=axis, keepdims=True, dtype=F64)).astype(DTYPE),)

    return make_output(y.astype(DTYPE), (x,), bw, "log_softmax")


# ---------------------------------------------------------------- convolution
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[F,C,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    F, Cw, k, k2 = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 is {C}, kernel axis 1 is {Cw}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got axes 2,3 = {k},{k2}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise DimensionError(f"conv2d input spatial axes {H}x{W} smaller than kernel {k}")
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {F} filters")

    p, s = padding, stride
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    # channels-last padded copy; the conv is a sum of k*k shifted matmuls
    xh = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=DTYPE)
    xh[:, p : p + H, p : p + W, :] = x.data.transpose(0, 2, 3, 1)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # k,k,C,F
    out = np.zeros((N, Ho, Wo, F), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += xh[:, i : i + s * Ho : s, j : j + s * Wo : s, :] @ wk[i, j]
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g3 = gh.reshape(N, Ho * Wo, F)
        dxh = np.zeros_like(xh)
        dwk = np.empty((k, k, C, F), dtype=F64)
        for j in range(k):
            xj = np.ascontiguousarray(xh[:, :, j : j + s * Wo : s, :])
            for i in range(k):
                dxh[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += gh @ wk[i, j].T
                v = xj[:, i : i + s * Ho : s].reshape(N, Ho * Wo, C)
                dwk[i, j] = np.matmul(v.transpose(0, 2, 1), g3).sum(axis=0, dtype=F64)
        dx = np.ascontiguousarray(dxh[:, p : p + H, p : p + W, :].transpose(0, 3, 1, 2))
        grads = [dx, dwk.transpose(3, 2, 0, 1).astype(DTYPE)]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 1), dtype=F64).astype(DTYPE))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y, parents, bw, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along both spatial axes."""
    N, C, H, W = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(N, C, 2 * H, 2 * W)

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_output(np.ascontiguousarray(y), (x,), bw, "upsample2x")


# ---------------------------------------------------------------- normalisation
def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects [N,C,H,W], got {x.shape}")
    N, C, H, W = x.shape
    if groups <= 0 or C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"group_norm affine params must have shape ({C},)")
    xg = x.data.reshape(N, groups, -1).astype(F64)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(N, C, H, W)
    gd = gamma.data.astype(F64).reshape(1, C, 1, 1)
    y = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        g64 = g.astype(F64)
        dgamma = (g64 * xhat).sum(axis=(0, 2, 3))
        dbeta = g64.sum(axis=(0, 2, 3))
        dxhat = (g64 * gd).reshape(N, groups, -1)
        xh = xhat.reshape(N, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(N, C, H, W).astype(DTYPE), dgamma.astype(DTYPE), dbeta.astype(DTYPE)

    return make_output(y.astype(DTYPE), (x, gamma, beta), bw, "group_norm")
