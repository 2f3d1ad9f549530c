"""Dense float64 tensors with a reverse-mode autodiff tape.

Storage is a row-major numpy array; every recorded operation keeps a
monotonically increasing sequence number, so reverse creation order is a
valid topological order for the backward sweep.  There is no graph
optimization and no broadcasting beyond numpy's elementwise rules.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_SEQ = itertools.count()


class _Node:
    __slots__ = ("parents", "backward_fn", "seq")

    def __init__(self, parents: tuple[Tensor, ...], backward_fn: Callable, seq: int):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = seq


class Tensor:
    """N-dimensional float64 array, optionally tracked on the gradient tape."""

    __slots__ = ("array", "requires_grad", "_grad", "_node")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- spec'd field views -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    @property
    def grad(self) -> np.ndarray | None:
        """Flat accumulated gradient, or None before any backward pass."""
        return None if self._grad is None else self._grad.reshape(-1)

    @property
    def grad_array(self) -> np.ndarray | None:
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.array.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.array)}
        for tensor in _reverse_topo(self):
            node = tensor._node
            grad_out = pending.pop(id(tensor), None)
            if grad_out is None:
                continue
            if tensor.requires_grad:
                if tensor._grad is None:
                    tensor._grad = np.zeros_like(tensor.array)
                tensor._grad += grad_out
            if node is None:
                continue
            parent_grads = node.backward_fn(grad_out)
            for parent, pgrad in zip(node.parents, parent_grads):
                if pgrad is None or not _tracks(parent):
                    continue
                # never mutate stored buffers: backward fns may alias outputs
                slot = pending.get(id(parent))
                pending[id(parent)] = pgrad if slot is None else slot + pgrad


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _reverse_topo(root: Tensor) -> list[Tensor]:
    """All tensors reachable from root, in descending creation order."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        if t._node is not None:
            stack.extend(t._node.parents)
    out.sort(key=lambda t: -1 if t._node is None else t._node.seq, reverse=True)
    return out


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    if any(_tracks(p) for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward_fn, next(_SEQ))
    return out


def as_tensor(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.array + b.array

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.array - b.array

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.array * b.array

    def backward(g):
        return _unbroadcast(g * b.array, a.shape), _unbroadcast(g * a.array, b.shape)

    return _result(values, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.array / b.array

    def backward(g):
        return (
            _unbroadcast(g / b.array, a.shape),
            _unbroadcast(-g * a.array / (b.array * b.array), b.shape),
        )

    return _result(values, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.array, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.array * factor, (a,), lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    values = np.exp(a.array)
    return _result(values, (a,), lambda g: (g * values,))


def sigmoid(a: Tensor) -> Tensor:
    values = 1.0 / (1.0 + np.exp(-a.array))
    return _result(values, (a,), lambda g: (g * values * (1.0 - values),))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    values = np.abs(a.array)
    return _result(values, (a,), lambda g: (g * np.sign(a.array),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.array >= b.array
    values = np.where(take_a, a.array, b.array)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _result(values, (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.array <= b.array
    values = np.where(take_a, a.array, b.array)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _result(values, (a, b), backward)


# -- linear algebra and shaping ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    values = a.array @ b.array

    def backward(g):
        return g @ b.array.T, a.array.T @ g

    return _result(values, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.array.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    values = a.array.reshape(shape)
    return _result(values.copy(), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor) -> Tensor:
    values = np.array(a.array.sum())
    return _result(values, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.array.size
    values = np.array(a.array.mean())
    return _result(values, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.array.ndim != 2:
        raise ShapeError(f"slice_cols needs a matrix, got shape {a.shape}")
    values = a.array[:, lo:hi].copy()

    def backward(g):
        full = np.zeros_like(a.array)
        full[:, lo:hi] = g
        return (full,)

    return _result(values, (a,), backward)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    values = a.array[idx].copy()

    def backward(g):
        full = np.zeros_like(a.array)
        np.add.at(full, idx, g)
        return (full,)

    return _result(values, (a,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    arrays = [p.array if p.array.ndim == 2 else p.array.reshape(1, -1) for p in parts]
    values = np.concatenate(arrays, axis=0)
    sizes = [arr.shape[0] for arr in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]].reshape(p.shape) for i, p in enumerate(parts)
        )

    return _result(values, tuple(parts), backward)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    values = np.concatenate([p.array for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result(values, tuple(parts), backward)


def stack_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    return concat_rows(parts)


def add_scalars(parts: Iterable[Tensor]) -> Tensor:
    total: Tensor | None = None
    for p in parts:
        total = p if total is None else add(total, p)
    if total is None:
        raise ShapeError("add_scalars needs at least one term")
    return total
