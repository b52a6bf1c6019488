"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient.  A tape is single use: :meth:`Tape.backward` walks
the recorded nodes in reverse, returns the gradients of the requested
parameters and clears the tape.

>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     y = square(x)
>>> tape.backward(y, {"x": x})["x"]
array(6.)
"""
from __future__ import annotations

import threading
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

ACOS_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation."""


class Tensor:
    """A float64 array that may take part in the active gradient tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records differentiable operations for one forward/backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._previous: Tape | None = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]) -> dict:
        """Gradients of a scalar ``loss`` with respect to ``params``.

        Returns a dict keyed like ``params`` (names for a mapping, positions for
        a sequence).  Parameters the loss does not depend on get zero arrays.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        items = params.items() if isinstance(params, Mapping) else enumerate(params)
        result = {}
        for key, p in items:
            g = grads.get(id(p))
            result[key] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
        self._nodes.clear()
        return result


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def acos(a) -> Tensor:
    """Arc cosine; callers must clamp to ``[-1 + ACOS_EPS, 1 - ACOS_EPS]`` first."""
    a = as_tensor(a)
    if a.size and (a.data.min() < -1.0 or a.data.max() > 1.0):
        raise ValueError("acos input outside [-1, 1]; clamp before calling")
    return _make(np.arccos(a.data), (a,),
                 lambda g: (-g / np.sqrt(1.0 - a.data * a.data),))


def safe_acos(a) -> Tensor:
    return acos(clamp(a, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    out = a.data * s

    def vjp(g):
        # d/dx x s(x) = s + x s (1 - s) = s + out - out s
        d = out * s
        np.subtract(out, d, out=d)
        d += s
        d *= g
        return (d,)

    return _make(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# --- contractions and reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, b.data) if b.ndim == 1 else g @ b.data.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            elif b.ndim == 1:
                gb = a.data.T @ g
            else:
                gb = a.data.T @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for a matrix ``x``, weight matrix ``w`` and bias vector ``b``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data
    out += b.data

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        return gx, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), vjp)


def gather_sum(terms: Sequence[tuple], bias, rows: int) -> Tensor:
    """``bias + sum_k terms_k[index_k]`` over ``rows`` rows in one pass.

    Each term is ``(tensor, index)``; a ``None`` index means the tensor already
    has ``rows`` rows.
    """
    bias = as_tensor(bias)
    tensors = [as_tensor(t) for t, _ in terms]
    indices = [idx for _, idx in terms]
    out = np.empty((rows, bias.shape[0]))
    out[:] = bias.data
    for t, idx in zip(tensors, indices):
        if idx is None:
            if t.shape != out.shape:
                raise ShapeError(f"gather_sum: term {t.shape} vs {out.shape}")
            out += t.data
        else:
            if len(idx) != rows or t.shape != (idx.size, out.shape[1]):
                raise ShapeError(f"gather_sum: term {t.shape} with index {len(idx)}->{idx.size}")
            out += t.data[idx.idx]

    def vjp(g):
        grads = [None if not t.requires_grad else (g if idx is None else idx.matrix @ g)
                 for t, idx in zip(tensors, indices)]
        return (*grads, g.sum(axis=0))

    return _make(out, (*tensors, bias), vjp)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), vjp)


# --- graph indexing -----------------------------------------------------------

class Index:
    """Maps ``len(idx)`` rows onto ``size`` segments.

    The one-hot incidence matrix is built lazily and reused by both gathering
    (segment -> row) and scattering (row -> segment).  With ``canonical`` the
    segment reductions add each segment's values in sorted order, so the
    result does not depend on the order of rows within a segment.
    """

    def __init__(self, idx: Iterable[int], size: int, canonical: bool = False):
        self.idx = np.asarray(idx, dtype=np.intp).reshape(-1)
        self.size = int(size)
        self.canonical = canonical
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.size):
            raise IndexError(f"index values must lie in [0, {self.size})")

    def __len__(self) -> int:
        return self.idx.size

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        m = self.idx.size
        return sp.csr_matrix((np.ones(m), (self.idx, np.arange(m))), shape=(self.size, m))

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.idx, minlength=self.size).astype(np.float64)

    @cached_property
    def inverse_counts(self) -> np.ndarray:
        # empty segments average to zero
        return np.divide(1.0, self.counts, out=np.zeros(self.size), where=self.counts > 0)

    @cached_property
    def mean_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(sp.diags(self.inverse_counts) @ self.matrix)

    @cached_property
    def _slots(self) -> tuple[np.ndarray, np.ndarray, int]:
        order = np.argsort(self.idx, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.counts.astype(np.intp))[:-1]])
        pos = np.arange(self.idx.size) - starts[self.idx[order]]
        width = int(self.counts.max()) if self.idx.size else 0
        return order, pos, width

    def sorted_sum(self, values: np.ndarray) -> np.ndarray:
        """Per-segment sums that depend only on the multiset of each segment's rows."""
        order, pos, width = self._slots
        dense = np.zeros((self.size, width, values.shape[1]))
        dense[self.idx[order], pos] = values[order]
        dense.sort(axis=1)
        return dense.sum(axis=1)


def gather(a, index: Index) -> Tensor:
    """Rows ``a[index.idx]``; the gradient scatters back with summation."""
    a = as_tensor(a)
    if a.shape[0] != index.size:
        raise ShapeError(f"gather: source has {a.shape[0]} rows, index expects {index.size}")
    return _make(a.data[index.idx], (a,), lambda g: (index.matrix @ g,))


def segment_sum(a, index: Index) -> Tensor:
    a = as_tensor(a)
    if a.shape[0] != len(index):
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs index of length {len(index)}")
    out = index.sorted_sum(a.data) if index.canonical else index.matrix @ a.data
    return _make(out, (a,), lambda g: (g[index.idx],))


def segment_mean(a, index: Index) -> Tensor:
    a = as_tensor(a)
    if a.shape[0] != len(index):
        raise ShapeError(f"segment_mean: {a.shape[0]} rows vs index of length {len(index)}")
    m = index.mean_matrix
    if index.canonical:
        out = index.sorted_sum(a.data) * index.inverse_counts[:, None]
    else:
        out = m @ a.data
    return _make(out, (a,), lambda g: (m.T @ g,))
