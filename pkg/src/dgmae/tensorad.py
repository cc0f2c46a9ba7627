"""A small reverse-mode autodiff engine over dense float64 matrices.

Tensors have rank at most 2. Operations executed inside an active
:class:`Tape` are recorded in creation order; ``Tape.backward`` walks that
list in reverse and *accumulates* into ``.grad``, so a parameter used by
several branches receives the sum of their contributions.

Outside a tape, operations just compute values (inference mode).
"""

from __future__ import annotations

import contextvars
import itertools
import os

import numpy as np
from scipy import sparse

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("dgmae_tape", default=None)
_ids = itertools.count()
_debug = os.environ.get("DGMAE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle the after-every-op finiteness check."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "_parents", "id")

    def __init__(self, value, requires_grad: bool = False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ValueError(f"rank must be <= 2, got shape {value.shape}")
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: g may be shared with sibling inputs
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            g = g.reshape(self.value.shape)
        self.grad = g if self.grad is None else self.grad + g

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss._accumulate(np.ones_like(loss.value))
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)
        # interior gradients are scratch space; only leaves keep theirs
        for node in self.nodes:
            node.grad = None
            node._backward = None
            node._parents = ()
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _debug and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced")
    out = Tensor(value)
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


def _send(t: Tensor, g) -> None:
    if t.requires_grad:
        t._accumulate(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    out = g
    for axis, size in enumerate(shape):
        if size == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    if len(sa) == 2 and len(sb) == 2:
        ok = all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
        if ok:
            return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return _record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, -_unbroadcast(g, b.shape))

    return _record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; row/column vectors broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        _send(a, _unbroadcast(g * b.value, a.shape))
        _send(b, _unbroadcast(g * a.value, b.shape))

    return _record(a.value * b.value, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda g: _send(a, g * c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _record(a.value @ b.value, (a, b), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if any(t.value.ndim != 2 for t in tensors):
        raise ValueError("concat expects matrices")
    value = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _send(t, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _record(value, tuple(tensors), backward)


def concat_rows(tensors) -> Tensor:
    return concat(tensors, axis=0)


def concat_cols(tensors) -> Tensor:
    return concat(tensors, axis=1)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            a._accumulate(full)

    return _record(a.value[:, start:stop], (a,), backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[start:stop] = g
            a._accumulate(full)

    return _record(a.value[start:stop], (a,), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.value.T, (a,), lambda g: _send(a, g.T))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _record(np.where(pos, a.value, slope * a.value), (a,), lambda g: _send(a, np.where(pos, g, slope * g)))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    neg = alpha * np.expm1(np.minimum(a.value, 0.0))
    value = np.where(pos, a.value, neg)
    return _record(value, (a,), lambda g: _send(a, np.where(pos, g, g * (neg + alpha))))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)
    return _record(value, (a,), lambda g: _send(a, g * value))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.value), (a,), lambda g: _send(a, g / a.value))


def power(a, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``."""
    a = as_tensor(a)
    p = float(p)
    value = np.power(a.value, p)
    return _record(value, (a,), lambda g: _send(a, g * p * np.power(a.value, p - 1.0)))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        value = np.asarray(a.value.sum())
        return _record(value, (a,), lambda g: _send(a, np.broadcast_to(g, a.shape)))
    value = a.value.sum(axis=axis, keepdims=True)
    return _record(value, (a,), lambda g: _send(a, np.broadcast_to(g, a.shape)))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def row_normalize_l2(a, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    a = as_tensor(a)
    norms = np.sqrt(np.einsum("ij,ij->i", a.value, a.value))[:, None]
    big = norms > eps
    denom = np.where(big, norms, eps)
    value = a.value / denom

    def backward(g):
        proj = np.einsum("ij,ij->i", value, g)[:, None]
        _send(a, np.where(big, (g - value * proj) / denom, g / eps))

    return _record(value, (a,), backward)


def row_dot(a, b) -> Tensor:
    """Per-row inner products, shape ``(n, 1)``."""
    return sum(mul(a, b), axis=1)


def _check_index(idx, n: int) -> np.ndarray:
    if not (isinstance(idx, np.ndarray) and idx.dtype == np.int64):
        idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for {n} rows")
    return idx


_scatter_cache: dict[tuple[int, int], tuple[np.ndarray, sparse.csr_matrix]] = {}


def _incidence(idx: np.ndarray, n: int) -> sparse.csr_matrix:
    # n x len(idx) 0/1 matrix; cached per index array since the same arcs recur every step
    key = (id(idx), n)
    hit = _scatter_cache.get(key)
    if hit is None or hit[0] is not idx:
        mat = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
        if len(_scatter_cache) > 256:
            _scatter_cache.clear()
        hit = (idx, mat)
        _scatter_cache[key] = hit
    return hit[1]


def _scatter(src: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(_incidence(idx, n) @ src)


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    idx = _check_index(idx, n)
    return _record(a.value[idx], (a,), lambda g: _send(a, _scatter(g, idx, n)))


def scatter_add_rows(src, idx, n: int) -> Tensor:
    """Row ``k`` of ``src`` is added into output row ``idx[k]``."""
    src = as_tensor(src)
    idx = _check_index(idx, n)
    if idx.size != src.shape[0]:
        raise ValueError("one index per source row required")
    return _record(_scatter(src.value, idx, n), (src,), lambda g: _send(src, g[idx]))


def segment_softmax(logits, dst, n: int) -> Tensor:
    """Softmax of per-arc logits within each destination segment, column by column."""
    logits = as_tensor(logits)
    dst = _check_index(dst, n)
    x = logits.value
    seg_max = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(seg_max, dst, x)
    e = np.exp(x - seg_max[dst])
    denom = _scatter(e, dst, n)
    w = e / denom[dst]

    def backward(g):
        inner = _scatter(w * g, dst, n)
        _send(logits, w * (g - inner[dst]))

    return _record(w, (logits,), backward)


def arc_aggregate(w, x, dst, src, n: int) -> Tensor:
    """Fused ``scatter_add_rows(gather_rows(x, src) * w, dst, n)`` for a per-arc weight column ``w``."""
    w, x = as_tensor(w), as_tensor(x)
    dst = _check_index(dst, n)
    src = _check_index(src, x.shape[0])
    if w.shape != (dst.size, 1) or src.size != dst.size:
        raise ValueError("arc_aggregate needs one weight per arc")
    mat = sparse.csr_matrix((w.value[:, 0], (dst, src)), shape=(n, x.shape[0]))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.asarray(mat.T @ g))
        if w.requires_grad:
            w._accumulate(np.einsum("ij,ij->i", g[dst], x.value[src])[:, None])

    return _record(np.asarray(mat @ x.value), (w, x), backward)
