"""Dense tensor with reverse-mode gradients.

A :class:`Tensor` wraps a row-major numpy buffer. Operations on tensors that
require gradients record a closure which, given the gradient of the output,
accumulates gradients into the inputs. :func:`backward` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_PRECISIONS = {"single": np.float32, "double": np.float64}
_dtype = np.float32


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected 'single' or 'double'")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return "double" if _dtype is np.float64 else "single"


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d array node. Immutable once produced by an op (parameters excepted)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None,
                 op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or (op == "leaf" and arr.dtype != _dtype):
            arr = arr.astype(_dtype)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def at(self, *index: int) -> float:
        """Element at a multi-index, read through the flat row-major buffer."""
        if len(index) != self.ndim:
            raise DimensionError(f"index has {len(index)} axes, tensor has {self.ndim}")
        offset = 0
        for i, (idx, extent) in enumerate(zip(index, self.shape)):
            if not 0 <= idx < extent:
                raise DimensionError(f"index {idx} out of range on axis {i} (extent {extent})")
            offset = offset * extent + idx
        return float(self.data.reshape(-1)[offset])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return tmax(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Create an op output; the closure is kept only if some parent needs grads."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# -- elementary differentiable ops ---------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        accumulate(a, -g)

    return make_node(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), bw, "mul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.shape))

    return make_node(np.asarray(out), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // np.asarray(out).size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g / count, a.shape))

    return make_node(np.asarray(out), (a,), bw, "mean")


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first (lowest index) maximum."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        accumulate(a, full)

    return make_node(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        accumulate(a, g.reshape(a.shape))

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return make_node(out, (a,), bw, "reshape")


def index(a: Tensor, key) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        accumulate(a, full)

    return make_node(np.array(a.data[key]), (a,), bw, "index")


def take(a: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        accumulate(a, full)

    return make_node(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accumulate(t, g[tuple(sl)])

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- graph traversal ---------------------------------------------------------

class Graph:
    """Topologically ordered record of the ops that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grads.

    When ``params`` is given, returns their gradients in order; parameters the
    loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph(loss)
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate grads are not needed once propagated
                node.grad = None
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
