"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation that involves a tensor with ``requires_grad`` records its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the recorded nodes in reverse creation order, which is
a valid topological order because a node is always created after its parents.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, EmptyMaskError, NumericError, ShapeError

_ids = itertools.count()
_state = threading.local()

KL_CLAMP = 1e-12
COSINE_EPS = 1e-8


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF written via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# -- reductions and shape ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the gradient."""

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), grad_fn)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    return index(a, np.asarray(rows, dtype=np.intp))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), grad_fn)


def merge_rows(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Place ``parts[k]`` at row positions ``rows[k]`` of a zero ``n_rows``-row array.

    Row sets are expected to be disjoint; each output row is written once, so no
    floating-point accumulation happens here.
    """
    if not parts:
        raise ShapeError("merge_rows needs at least one part")
    tail = parts[0].shape[1:]
    out = np.zeros((n_rows,) + tail)
    for part, r in zip(parts, rows):
        out[r] = part.data

    def grad_fn(g):
        return tuple(g[r] for r in rows)

    return _make(out, tuple(parts), grad_fn)


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """Batched matrix product over the last two axes.

    With ``row_stable`` each output row is computed by a fixed-order reduction
    that does not depend on how many rows ``a`` has, so evaluating a subset of
    rows reproduces the same bits. BLAS gives no such guarantee.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if row_stable:
        out = np.einsum("...ij,...jk->...ik", a.data, b.data, optimize=False)
    else:
        out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn)


# -- normalisation and probability --------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean, unit population variance, then scale and shift."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match last dim {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), grad_fn)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis (kept as a length-1 axis); zero rows get zero gradient."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, g * x.data / safe, 0.0),)

    return _make(n, (x,), grad_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient passes only where ``a > floor``."""
    above = a.data > floor
    return _make(np.where(above, a.data, floor), (a,), lambda g: (np.where(above, g, 0.0),))


def normalize_rows(x: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Rows scaled to unit length; norms below ``eps`` are floored so zero rows map to zero."""
    return x / clamp_min(row_norm(x), eps)


def cosine_sim(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim length mismatch: {a.shape} vs {b.shape}")
    return (normalize_rows(a, eps) * normalize_rows(b, eps)).sum(axis=-1)


def kl_div(p, q) -> Tensor:
    """KL(p || q) over the last axis, ``q`` clamped at 1e-12 and ``0 ln 0 = 0``."""
    p, q = _lift(p), _lift(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if not np.allclose(t.data.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
            raise NumericError(f"kl_div: {name} does not sum to 1")
    qc = np.maximum(q.data, KL_CLAMP)
    pos = p.data > 0.0
    ratio = np.log(np.where(pos, p.data, 1.0) / qc)
    out = np.where(pos, p.data * ratio, 0.0).sum(axis=-1)

    def grad_fn(g):
        g = np.expand_dims(g, -1)
        gp = np.where(pos, g * (ratio + 1.0), 0.0)
        gq = np.where(q.data > KL_CLAMP, -g * p.data / qc, 0.0)
        return gp, gq

    return _make(out, (p, q), grad_fn)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.intp)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise EmptyMaskError("cross_entropy_masked: no masked positions")
    logp = log_softmax(take_rows(logits, rows), axis=-1)
    picked = index(logp, (np.arange(rows.size), targets[rows]))
    return -picked.mean()


def mse(a: Tensor, b) -> Tensor:
    d = a - b
    return (d * d).mean()


# -- backward ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The tape below ``loss`` is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` must build a fresh graph from its argument on each call.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for i in np.ndindex(base.shape):
            probe = base.copy()
            probe[i] = base[i] + step
            up = f(Tensor(probe)).item()
            probe[i] = base[i] - step
            down = f(Tensor(probe)).item()
            numeric[i] = (up - down) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
