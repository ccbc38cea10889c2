"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient. Outside of a tape nothing is
recorded, which is how frozen forward passes are run.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "current_tape",
    "exp",
    "gelu",
    "lgamma",
    "log",
    "log1p",
    "log_softmax",
    "logaddexp",
    "logsumexp",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "softmax_rows",
    "softplus",
    "sqrt",
    "tanh",
    "where",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one backward pass.

    A tape is confined to the thread that opened it and is consumed by
    exactly one call to :meth:`backward`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        self.records.append((out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        produced = set()
        for out, parents, fn in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = parent
        for key, g in grads.items():
            if key in produced:
                continue
            leaf = owners[key]
            if not leaf.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.records.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


class Tensor:
    """A float64 array that can participate in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # reductions and shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> Tensor:
        return transpose(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(data: np.ndarray, op: str) -> None:
    if np.isnan(data).any():
        raise NonFiniteError(f"NaN produced by {op}")


def _make(data, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check(data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = current_tape()
        if tape is not None:
            tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise binary -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
        "matmul",
    )


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def fn(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(a.data), 0.0, np.exp(a.data - out))
            wb = np.where(np.isneginf(b.data), 0.0, np.exp(b.data - out))
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _make(out, (a, b), fn, "logaddexp")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where",
    )


# elementwise unary ------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * special.expit(a.data),), "softplus")


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# reductions -------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), fn, "sum")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _make(out, (a,), lambda g: ((g if keepdims else np.expand_dims(g, axis)) * np.exp(a.data - lse),), "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _make(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by row-max subtraction."""
    return softmax(a, axis=-1)


# shape ------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), fn, "getitem")


def diag(a) -> Tensor:
    a = as_tensor(a)
    n = min(a.shape)
    idx = np.arange(n)
    return getitem(a, (idx, idx))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )
