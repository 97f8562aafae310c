"""Minimal dense reverse-mode autodiff over numpy arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a closure that maps the output
adjoint to input adjoints. :func:`backward` replays those closures in reverse
topological order and accumulates into the ``grad`` of leaf tensors.

Shapes are never broadcast implicitly, with one exception: a 0-d tensor may be
combined with a tensor of any shape in :func:`add` and :func:`hadamard`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the computation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._backward(g)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gp
            else:
                adjoint[key] = gp


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _scalar_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- binary ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: need matrices, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = np.matmul(a.data, b.data)

    def back(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None,
            np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "matmul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _scalar_pair(a, b, "hadamard")
    out = a.data * b.data

    def back(g):
        return (
            _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "hadamard")


def add(a: Tensor, b: Tensor) -> Tensor:
    _scalar_pair(a, b, "add")
    out = a.data + b.data

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), back, "add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of length ``x.shape[-1]`` to every row of ``x``."""
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    out = x.data + b.data

    def back(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _make(out, (x, b), back, "add_bias")


# -- unary ops --------------------------------------------------------------


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive entry")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def reciprocal(a: Tensor) -> Tensor:
    out = 1 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g, 0),), "relu")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back, "sum")


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def expand(a: Tensor, copies: int, axis: int = 0) -> Tensor:
    """Stack ``copies`` replicas of ``a`` along a new axis at position ``axis``."""
    shape = a.shape[:axis] + (copies,) + a.shape[axis:]
    out = np.broadcast_to(np.expand_dims(a.data, axis), shape)
    return _make(out, (a,), lambda g: (g.sum(axis=axis),), "expand")


# -- losses -----------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be batch x classes, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range [0, {classes})")
    top = logits.data.argmax(axis=1)
    rows = np.arange(batch)
    z = logits.data - logits.data[rows, top][:, None]
    # log-sum-exp as log1p of the non-maximal mass keeps tiny losses accurate
    rest = np.exp(z)
    rest[rows, top] = 0.0
    lse = np.log1p(rest.sum(axis=1))
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / batch),)

    return _make(loss, (logits,), back, "softmax_cross_entropy")
