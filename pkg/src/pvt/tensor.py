"""Minimal reverse-mode automatic differentiation on top of numpy.

Every op returns a new :class:`Tensor` holding a contiguous float64 array.
When any input requires a gradient the output remembers its parents and a
backward rule; :func:`backward` walks those records in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_seq = itertools.count()
_local = threading.local()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ParameterError(ValueError):
    """Raised when a scalar hyperparameter is out of its valid range."""


class EmptySliceError(ValueError):
    """Raised when a masked reduction sees a slice with no valid entry."""


@dataclass
class Diagnostics:
    all_masked_softmax: int = 0

    def reset(self) -> None:
        self.all_masked_softmax = 0


diagnostics = Diagnostics()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul in scope."""

    def __init__(self) -> None:
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_macs(n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.macs += n


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray):
            arr = data if data.dtype == np.float64 and data.flags.c_contiguous \
                else np.ascontiguousarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(a))``."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """Exact (erf based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    return _make(x * cdf, (a,),
                 lambda g: (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def pad(a, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` follows :func:`numpy.pad`."""
    a = as_tensor(a)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (np.ascontiguousarray(g[sl]),))


def take(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; gradient scatter-adds back to the source rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(np.moveaxis(a.data, axis, 0).shape)
        np.add.at(full, index, np.moveaxis(g, axis, 0))
        return (np.ascontiguousarray(np.moveaxis(full, 0, axis)),)

    return _make(np.take(a.data, index, axis=axis), (a,), bw)


def scatter_rows(a, index: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of ``a`` at ``index`` in a zero array of ``n_rows`` rows.

    ``index`` must not repeat; the gradient gathers rows back.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_rows: duplicate destination rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.data
    return _make(out, (a,), lambda g: (g[index],))


# ----------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    _record_macs(math.prod(out.shape) * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and as_tensor(b).shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {as_tensor(b).shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = y + b
    return reshape(y, lead + (w.shape[1],))


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be > 0, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# ----------------------------------------------------------------------------
# masked reductions


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    try:
        return np.broadcast_to(m.astype(bool), shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {m.shape} not broadcastable to {shape}") from exc


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries get exactly zero weight.

    A slice with no valid entry yields all zeros and bumps
    ``diagnostics.all_masked_softmax``.
    """
    logits = as_tensor(logits)
    m = _mask_array(mask, logits.shape)
    x = np.where(m, logits.data, -np.inf)
    top = x.max(axis=axis, keepdims=True)
    empty = ~np.isfinite(top)
    if empty.any():
        diagnostics.all_masked_softmax += int(empty.sum())
        top = np.where(empty, 0.0, top)
    e = np.where(m, np.exp(np.where(m, logits.data, 0.0) - top), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), bw)


def masked_max(x, mask, axis: int, allow_empty: bool = False) -> tuple[Tensor, np.ndarray]:
    """Per-channel max over valid entries along ``axis``.

    Returns the reduced values and the winning index per output entry. Ties go
    to the lowest index, which alone receives the gradient. Empty slices raise
    unless ``allow_empty``, in which case they produce 0 (argmax -1).
    """
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    valid = m.any(axis=axis)
    if not allow_empty and not valid.all():
        raise EmptySliceError("masked_max: slice with no valid entry")
    filled = np.where(m, x.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    vals = np.where(valid, vals, 0.0)
    arg = np.where(valid, arg, -1)

    def bw(g):
        full = np.zeros_like(x.data)
        safe = np.expand_dims(np.where(valid, arg, 0), axis)
        np.put_along_axis(full, safe, np.expand_dims(np.where(valid, g, 0.0), axis), axis=axis)
        return (full,)

    return _make(vals, (x,), bw), arg


def masked_mean(x, mask, axis: int) -> Tensor:
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    cnt = m.sum(axis=axis, keepdims=True)
    if (cnt == 0).any():
        raise EmptySliceError("masked_mean: slice with no valid entry")
    # weight-then-sum, so uniform attention weights reproduce this bit for bit
    w = np.where(m, 1.0 / cnt, 0.0)
    out = (w * np.where(m, x.data, 0.0)).sum(axis=axis)

    def bw(g):
        return (w * np.expand_dims(g, axis),)

    return _make(out, (x,), bw)


def _segments(segment_ids: np.ndarray, n_segments: int):
    ids = np.asarray(segment_ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    counts = np.bincount(ids, minlength=n_segments)
    if (counts == 0).any():
        raise EmptySliceError("segment reduction: segment with no member")
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    return ids, order, counts, starts


def segment_max(x, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Row-wise max of ``x`` (m x d) per segment; ties go to the earliest row."""
    x = as_tensor(x)
    ids, order, counts, starts = _segments(segment_ids, n_segments)
    xs = x.data[order]
    vals = np.maximum.reduceat(xs, starts, axis=0)
    hit = xs == vals[ids[order]]
    pos = np.where(hit, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    winner = order[first]                      # n_segments x d source rows
    cols = np.broadcast_to(np.arange(x.shape[1]), winner.shape)

    def bw(g):
        full = np.zeros_like(x.data)
        full[winner, cols] = g
        return (full,)

    return _make(vals, (x,), bw)


def segment_mean(x, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    x = as_tensor(x)
    ids, order, counts, starts = _segments(segment_ids, n_segments)
    sums = np.add.reduceat(x.data[order], starts, axis=0)
    return _make(sums / counts[:, None], (x,), lambda g: ((g / counts[:, None])[ids],))


def where_mask(x, mask) -> Tensor:
    """Zero entries of ``x`` outside ``mask`` (gradient blocked there too)."""
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (np.where(m, g, 0.0),))


# ----------------------------------------------------------------------------
# backward pass


@dataclass
class GradTape:
    """Recorded operations reachable from one output, in creation order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = GradTape.from_output(loss)
    if not tape.nodes:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
    return tape


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x.data`` restored)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"finite_diff_grad: eps must lie in [1e-7, 1e-3], got {eps}")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.asarray(_scalar(f(x))))
            flat[i] = orig - eps
            fm = float(np.asarray(_scalar(f(x))))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
