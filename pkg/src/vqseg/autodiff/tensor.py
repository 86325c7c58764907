"""Dense float32 tensors with a reverse-mode gradient tape.

Every differentiable op appends a :class:`Node` carrying a monotonically
increasing sequence number.  :func:`backward` replays the reachable nodes in
strictly decreasing sequence order, i.e. the exact reverse of creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import DimensionError, GraphError, NumericalError

DTYPE = np.float32

_seq = itertools.count()
_state = {"grad_enabled": True, "check_finite": False}


class Node:
    """One recorded op: its inputs and the closure mapping the output grad to input grads."""

    __slots__ = ("seq", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self.shape)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", grad_fn={self._node.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def _raise_non_scalar(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def detect_anomaly():
    """Check every op output for NaN/Inf and raise naming the op that produced it."""
    prev = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = prev


def make_output(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording a node when any parent needs gradients."""
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'", op=op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out._retain = False
    out.name = None
    out._node = None
    out.requires_grad = False
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every reachable leaf that requires gradients.

    ``inputs`` lists extra leaves that must end up with a gradient even when
    the loss does not depend on them (they receive zeros).  Gradients
    accumulate into existing ``.grad`` buffers, torch-style.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss is detached: it was not produced by a recorded graph")

    nodes: dict[int, Node] = {}
    owner: dict[int, Tensor] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            if t._node.consumed:
                raise GraphError("backward called twice on the same graph without rebuilding it")
            nodes[t._node.seq] = t._node
            owner[t._node.seq] = t
            stack.extend(p for p in t._node.parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        out = owner[seq]
        g = grads.pop(id(out), None)
        if out._retain:
            out.grad = g if g is not None else np.zeros_like(out.data)
        if g is None:
            node.consumed = True
            node.backward_fn = None
            continue
        in_grads = node.backward_fn(g)
        node.consumed = True
        node.backward_fn = None
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise DimensionError(
                    f"op '{node.op}' returned grad of shape {pg.shape} for input of shape {p.data.shape}"
                )
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
            if p._node is None:
                leaves[k] = p

    for k, leaf in leaves.items():
        g = grads[k].astype(DTYPE, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
