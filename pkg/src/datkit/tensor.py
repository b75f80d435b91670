"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to one adjoint per parent.
:func:`backward` walks that implicit graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from datkit.errors import DimensionError, NonFiniteError

DTYPES = (np.float32, np.float64)

_grad_enabled = True
check_finite = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
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


class Tensor:
    """An n-dimensional float array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result_dtype(*arrays: np.ndarray):
    return np.result_type(*arrays)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of a recorded operation."""
    if check_finite and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return make(a.data / b.data, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the adjoint is zero where clamping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}"
        ) from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the adjoint scatter-adds repeated picks."""
    y = x.data[index]
    if isinstance(y, np.ndarray) and np.shares_memory(y, x.data):
        y = y.copy()
    else:
        y = np.asarray(y)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make(y, (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    neg = tuple(-s for s in shifts)
    return make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, neg, axes),), "roll")


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(np.asarray(y), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- backward -----------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``; every node follows its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf), contracted with ``seed``, into every leaf's ``grad``.

    ``seed`` defaults to ones (so a scalar loss gets the usual gradient).
    Repeated calls accumulate; clear with :meth:`Tensor.zero_grad`.
    """
    if seed is None:
        seed_arr = np.ones_like(root.data)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=root.dtype)
        if seed_arr.shape != root.shape:
            raise DimensionError(
                f"seed shape {seed_arr.shape} does not match output shape {root.shape}"
            )
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): seed_arr}
    for node in reversed(topo_order(root)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
