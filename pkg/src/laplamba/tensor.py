"""Dense tensor with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy buffer. Operations that involve at
least one tensor with ``requires_grad=True`` attach a :class:`Node` to their
output. Nodes carry a monotonically increasing sequence number taken at
construction time, so sorting the reachable nodes by that number yields a
valid topological order without an explicit graph search.

Differentiable operations are defined with :func:`record`, which takes the
forward result, the parent tensors, and a closure mapping the output gradient
to one gradient per parent.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, UnsupportedError

DEFAULT_DTYPE = np.float64

_sequence = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _anomaly_enabled() -> bool:
    return getattr(_state, "anomaly", False)


@contextmanager
def no_grad():
    """Disable graph recording within the block (inference, finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def detect_anomaly(enabled: bool = True):
    """Reject non-finite values produced by any operation inside the block."""
    prev = _anomaly_enabled()
    _state.anomaly = enabled
    try:
        yield
    finally:
        _state.anomaly = prev


def set_detect_anomaly(enabled: bool) -> None:
    _state.anomaly = bool(enabled)


GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "op", "parents", "grad_fn", "consumed")

    def __init__(self, op: str, parents: tuple, grad_fn: GradFn):
        self.seq = next(_sequence)
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """N-dimensional float array that can participate in the gradient tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        Only scalar losses are accepted unless an explicit seed gradient is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ContractError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            raise ContractError("tensor does not require grad")
        if self._node is None:
            self.grad = grad.copy() if self.grad is None else self.grad + grad
            return
        if self._node.consumed:
            raise UnsupportedError(
                "graph already traversed; double backward is not supported"
            )

        nodes = _collect(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for owner in nodes:
            node = owner._node
            g = grads.pop(id(owner), None)
            if g is not None:
                parent_grads = node.grad_fn(g)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if pg.shape != parent.shape:
                        raise ContractError(
                            f"{node.op}: gradient shape {pg.shape} != parent {parent.shape}"
                        )
                    if parent._node is None:
                        parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                    else:
                        key = id(parent)
                        grads[key] = grads[key] + pg if key in grads else pg
            node.grad_fn = None
            node.consumed = True

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise UnsupportedError("division by a tensor is not provided; use scalars")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

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

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _collect(root: Tensor) -> list:
    """Reachable non-leaf tensors, ordered by decreasing construction sequence."""
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        if t._node.consumed:
            raise UnsupportedError(
                "graph already traversed; double backward is not supported"
            )
        seen.add(id(t))
        found.append(t)
        for p in t._node.parents:
            if p.requires_grad and p._node is not None and id(p) not in seen:
                stack.append(p)
    found.sort(key=lambda t: t._node.seq, reverse=True)
    return found


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def record(op: str, out: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """Wrap a forward result, attaching a tape node when gradients are needed."""
    if _anomaly_enabled() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    result = Tensor.__new__(Tensor)
    result.data = out if out.flags.c_contiguous else out.copy(order="C")
    result.grad = None
    result._node = None
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    result.requires_grad = needs
    if needs:
        result._node = Node(op, tuple(parents), grad_fn)
    return result


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
