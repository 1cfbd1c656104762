"""Dense tensors with a recorded graph and reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``node``
points back at its inputs together with a closure computing the
vector-Jacobian product. ``Tensor.backward`` walks that graph once in reverse
topological order and releases the saved activations as it goes, so calling it
a second time on the same graph raises :class:`GraphError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (double backward, non-scalar loss)."""


def _get(name, default):
    return getattr(_local, name, default)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return _get("default_dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    prev = get_default_dtype()
    _local.default_dtype = dtype
    try:
        yield
    finally:
        _local.default_dtype = prev


class Node:
    """One recorded operation: inputs plus the closure that maps grad_out to input grads."""

    __slots__ = ("op", "parents", "backward_fn", "released")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.released = False

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={len(self.parents)}, released={self.released})"


class Tensor:
    """Row-major float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else get_default_dtype()
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls (that is how gradient
        accumulation works); interior buffers are freed once consumed.
        """
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise GraphError(f"seed grad shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad and has no recorded graph")
        if self.node is None:
            _accumulate_leaf(self, grad)
            return
        if self.node.released:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")

        order = topological_order(self)
        pending = {id(self): grad}
        for t in reversed(order):
            g = pending.pop(id(t), None)
            node = t.node
            if g is None:
                node.released = True
                node.backward_fn = None
                continue
            if node.released:
                raise GraphError(f"graph node {node.op} was already released")
            parent_grads = node.backward_fn(g)
            node.backward_fn = None
            node.released = True
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg

    # operator sugar lives in ops.py to keep this module free of op definitions


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise GraphError(f"gradient shape {g.shape} does not match leaf shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.dtype, copy=False)


def topological_order(root: Tensor) -> list:
    """Interior tensors reachable from ``root`` in topological order (inputs first)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in visited:
                stack.append((p, False))
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when any input needs grad."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out
