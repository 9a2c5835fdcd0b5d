"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive below computes its value eagerly with numpy and, when a
:class:`Tape` is active and one of its inputs is tracked, records a closure
that maps the output cotangent to input cotangents.  ``Tape.gradient`` replays
those closures in reverse recording order.

    with Tape() as tape:
        y = softmax_rows(x @ w)
        loss = sum_all(y * y)
    gw, = tape.gradient(loss, [w])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import ndtr

from .errors import DimensionError, NumericError, ParameterError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """An n-dimensional float64 array, optionally a differentiation leaf."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}{', requires_grad' if self.requires_grad else ''})"

    # operator sugar; all map onto the primitives below
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))
        self._tracked.add(id(out))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Cotangents of ``sum(target)`` with respect to each source.

        Sources that did not take part in the recorded computation get zeros.
        """
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self.records):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not self.watches(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by tensor op")
    out.data = data
    out.requires_grad = False
    out.name = None
    for tape in _tape_stack():
        if any(tape.watches(t) for t in inputs):
            tape.record(out, inputs, backward)
    return out


def _index_add_rows(n_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Zero array of ``n_rows`` rows with ``values`` summed in at ``index``."""
    if index.size == 0:
        return np.zeros((n_rows,) + values.shape[1:])
    if np.bincount(index, minlength=n_rows).max() <= 1:
        out = np.zeros((n_rows,) + values.shape[1:])
        out[index] = values
        return out
    flat = values.reshape(len(index), -1)
    summer = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index)))
    return np.asarray(summer @ flat).reshape((n_rows,) + values.shape[1:])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (0.5 * g / out,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


# --- linear algebra and shape -----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (stack) dimensions must agree exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _emit(out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop], (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.intp)

    return _emit(x.data[index], (x,), lambda g: (_index_add_rows(x.shape[0], index, g),))


def scatter_add_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``x`` into a zero matrix of ``n_rows`` rows at ``index``."""
    index = np.asarray(index, dtype=np.intp)
    return _emit(_index_add_rows(n_rows, index, x.data), (x,), lambda g: (g[index],))


def take(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise gather ``x[rows[j], cols[j]]`` from a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        flat = np.bincount(rows * x.shape[1] + cols, weights=g, minlength=x.data.size)
        return (flat.reshape(x.shape),)

    return _emit(x.data[rows, cols], (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    return _emit(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# --- reductions --------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return sum_all(x) * (1.0 / x.data.size)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return sum_axis(x, axis, keepdims) * (1.0 / x.shape[axis])


# --- nonlinearities ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * scale, (x,), lambda g: (g * scale,))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    # derivative is the logistic function, evaluated without overflow
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _emit(out, (x,), lambda g: (g * sig,))


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF, with the standard normal density as derivative."""
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _emit(ndtr(x.data), (x,), lambda g: (g * pdf,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _emit(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply gain/bias."""
    n = x.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shape mismatch: {list(gain.shape)}, {list(bias.shape)} vs {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xc, xc)[..., None] / n + eps)
    xhat = xc * inv

    def backward(g):
        gh = g * gain.data
        proj = np.einsum("...i,...i->...", gh, xhat)[..., None] / n
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * proj)
        g2 = g.reshape(-1, n)
        return gx, np.einsum("ri,ri->i", g2, xhat.reshape(-1, n)), g2.sum(axis=0)

    return _emit(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def add_n(xs: Iterable[Tensor]) -> Tensor:
    xs = list(xs)
    out = xs[0]
    for t in xs[1:]:
        out = add(out, t)
    return out
