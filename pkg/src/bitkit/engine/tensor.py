"""Dense tensors with a reverse-mode autodiff tape.

A ``Tensor`` wraps a contiguous numpy array (float32 for training, float64
for gradient checks).  Every differentiable op that touches a tensor with
``requires_grad`` produces a node holding its parents and a backward
closure.  ``backward`` linearises the graph reachable from a scalar loss
into a ``Tape`` (topological order), runs the closures in reverse exactly
once each, and then releases the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import NumericError, UsageError

FLOAT_DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, fingerprinting)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            dtype = data.dtype
        else:
            dtype = np.float32
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.ascontiguousarray(data, dtype=dtype)


class Tensor:
    """N-dimensional float array that can take part in autodiff.

    Leaves are created directly; interior nodes are created by ops and
    carry ``_parents`` and ``_backward`` until ``backward`` consumes them.
    Equality and hashing are by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

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
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op}{flag})"

    # operator sugar; implementations live in ops.py
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(arr: np.ndarray, op: str) -> None:
    # a single reduction catches NaN/Inf; overflow of the sum itself is
    # double-checked elementwise before raising
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording it on the graph when any parent needs grad."""
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Operations reachable from an output, inputs before consumers."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from every trainable leaf reachable from ``loss`` to its
    gradient (also stored on ``leaf.grad``).  The graph is freed afterwards,
    so calling ``backward`` twice on the same loss is a usage error.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any trainable tensor")
    if loss.is_leaf and loss._op != "leaf":
        raise UsageError("graph for this loss was already consumed")

    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    tape.release()
    return leaves
