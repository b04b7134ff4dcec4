"""Dense tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor.  ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients into the ``grad`` field of leaf
tensors that were created with ``requires_grad=True``.

Gradients *accumulate*: calling ``backward`` twice on the same loss without
``zero_grad`` in between doubles the stored gradients.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @classmethod
    def of(cls, dtype) -> "Precision":
        return cls.DOUBLE if np.dtype(dtype) == np.float64 else cls.SINGLE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    # ascontiguousarray would promote 0-d arrays to 1-d
    return np.asarray(arr, order="C")


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
    ):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        """Differentiable dtype cast."""
        src = self.data.dtype
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ----------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)


def _raise_item(shape):
    raise UsageError(f"item() requires a single-element tensor, got shape {shape}")


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _wrap(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _wrap(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _wrap(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    ad, bd = a.data, b.data
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


# -- reductions and shape ----------------------------------------------------
def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (B, C, ...) input, got {x.shape}")
    return mean(x, tuple(range(2, x.ndim)))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], order="C")
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != ndim or any(p.shape[d] != ref[d] for d in range(ndim) if d != axis):
            raise ShapeError(
                f"concat along axis {axis}: part {i} has shape {p.shape}, expected {ref} off-axis"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        sl = [slice(None)] * ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def broadcast_repeat(a: Tensor, shape) -> Tensor:
    """Repeat singleton dims to ``shape``; every source dim must be 1 or equal."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s not in (1, t) for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_repeat: cannot expand {a.shape} to {shape}")
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),))


def pad_zeros(a: Tensor, axis: int, before: int = 0, after: int = 0) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis % a.ndim] = (before, after)
    out = np.pad(a.data, widths)
    sl = [slice(None)] * a.ndim
    sl[axis % a.ndim] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return _make(out, (a,), lambda g: (g[sl],))


# -- products ------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product (B, m, k) x (B, k, n) -> (B, m, n); ``b`` may be a shared (k, n)."""
    if a.ndim != 3 or b.ndim not in (2, 3) or a.shape[2] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 3 and b.shape[0] != a.shape[0]:
        raise ShapeError(f"bmm: batch sizes differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if bd.ndim == 2:
            gb = gb.sum(axis=0)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def stack_data(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Non-differentiable stack, for batching samples."""
    return Tensor(np.stack([t.data if isinstance(t, Tensor) else np.asarray(t) for t in tensors], axis))
