"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _scalar(fn, tensors, weights):
    out = fn(*tensors)
    return float(np.sum(out.data.astype(np.float64) * weights))


def finite_difference_grad(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    weights: np.ndarray,
    wrt: int,
    h: float = 1e-3,
) -> np.ndarray:
    """d/d inputs[wrt] of sum(weights * fn(*inputs)) by central differences.

    Inputs are stored as float32; the weighted sum is accumulated in float64.
    """
    base = [np.asarray(a, dtype=np.float32) for a in inputs]
    target = base[wrt]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + np.float32(h)
        plus = _scalar(fn, [Tensor(a) for a in base], weights)
        flat[i] = orig - np.float32(h)
        minus = _scalar(fn, [Tensor(a) for a in base], weights)
        flat[i] = orig
        step = (np.float64(np.float32(orig + np.float32(h))) - np.float64(np.float32(orig - np.float32(h))))
        grad.reshape(-1)[i] = (plus - minus) / step
    return grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    h: float = 3e-3,
    rtol: float = 1e-2,
    atol: float = 1e-3,
) -> dict:
    """Compare analytic and finite-difference gradients for every input.

    The probe loss is ``sum(w * fn(*inputs))`` with fixed random ``w`` so that
    every output element contributes.  An element fails when its absolute
    error exceeds ``atol`` *and* its relative error exceeds ``rtol``.
    Returns the worst errors and an ``ok`` flag.

    The default step sits near the float32 optimum eps**(1/3), where
    truncation and round-off errors of the central difference balance.
    """
    from . import ops

    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float32) for a in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    weights = rng.uniform(0.5, 1.5, size=out.shape)
    loss = ops.sum(ops.mul(out, Tensor(weights)))
    backward(loss, inputs=ts)

    worst_abs = 0.0
    worst_rel = 0.0
    ok = True
    for i, t in enumerate(ts):
        num = finite_difference_grad(fn, arrays, weights, i, h=h)
        ana = t.grad.astype(np.float64)
        abs_err = np.abs(ana - num)
        rel_err = abs_err / np.maximum(np.abs(num), 1e-12)
        bad = (abs_err > atol) & (rel_err > rtol)
        ok = ok and not bad.any()
        worst_abs = max(worst_abs, float(abs_err.max(initial=0.0)))
        significant = np.abs(num) > atol / rtol
        if significant.any():
            worst_rel = max(worst_rel, float(rel_err[significant].max()))
    return {"ok": ok, "max_abs": worst_abs, "max_rel": worst_rel}
