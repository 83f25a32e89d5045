"""Minimal float64 tensor library with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable operation records a backward
closure on the result node. Calling ``backward()`` on a scalar loss walks the
graph in reverse topological order and accumulates gradients into every node
that requires them. All randomness (dropout) comes from an explicit
``numpy.random.Generator`` so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive score for masked attention keys: large enough that exp() underflows
# to exactly 0 after max-subtraction, small enough to stay finite in float64.
MASK_SCORE = -1e30


class Tensor:
    """A float64 array plus optional gradient and autodiff graph linkage.

    ``data`` and ``grad`` are exposed as flat views over the underlying
    storage so that ``len(data) == prod(shape)`` always holds.
    """

    __slots__ = ("array", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- spec-facing views ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat float64 view of the stored values."""
        return self.array.reshape(-1)

    @property
    def grad(self) -> np.ndarray | None:
        """Flat view of the accumulated gradient, or None before backward."""
        if self._grad is None:
            return None
        return self._grad.reshape(-1)

    def grad_array(self) -> np.ndarray | None:
        """Gradient with the same shape as ``array`` (None before backward)."""
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.array)
        self._grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this node; seeds with ones."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._grad = np.ones_like(self.array)
        for node in reversed(topo):
            if node._backward is not None and node._grad is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.array + b.array

    def bw(t):
        def run():
            a._accumulate(_unbroadcast(t._grad, a.shape))
            b._accumulate(_unbroadcast(t._grad, b.shape))

        return run

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.array * b.array

    def bw(t):
        def run():
            a._accumulate(_unbroadcast(t._grad * b.array, a.shape))
            b._accumulate(_unbroadcast(t._grad * a.array, b.shape))

        return run

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with broadcastable batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from e
    out = a.array @ b.array

    def bw(t):
        def run():
            ga = t._grad @ b.array.swapaxes(-1, -2)
            gb = a.array.swapaxes(-1, -2) @ t._grad
            a._accumulate(_unbroadcast(ga, a.shape))
            b._accumulate(_unbroadcast(gb, b.shape))

        return run

    return _make(out, (a, b), bw)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.array.reshape(shape)

    def bw(t):
        def run():
            a._accumulate(t._grad.reshape(a.shape))

        return run

    return _make(out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.array.transpose(axes)

    def bw(t):
        def run():
            a._accumulate(t._grad.transpose(inv))

        return run

    return _make(out, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.array for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(t):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(t._grad[tuple(idx)])

        return run

    return _make(out, parts, bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.array for p in parts], axis=axis)

    def bw(t):
        def run():
            slabs = np.moveaxis(t._grad, axis, 0)
            for p, g in zip(parts, slabs):
                p._accumulate(g)

        return run

    return _make(out, parts, bw)


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; gradient scatter-adds (duplicates sum)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(
            f"index_select out of range for axis {axis} of shape {a.shape}"
        )
    out = np.take(a.array, idx, axis=axis)

    def bw(t):
        def run():
            g = np.zeros_like(a.array)
            np.add.at(g, (slice(None),) * axis + (idx,), t._grad)
            a._accumulate(g)

        return run

    return _make(out, (a,), bw)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.array.sum(axis=axis, keepdims=keepdims)

    def bw(t):
        def run():
            g = t._grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return run

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.array.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else a.shape[axis]

    def bw(t):
        def run():
            g = t._grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / denom)

        return run

    return _make(out, (a,), bw)


# -- neural primitives --------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    x = as_tensor(x)
    ax = axis if axis >= 0 else x.ndim + axis
    if x.ndim == 0 or ax < 0 or ax >= x.ndim or x.shape[ax] == 0:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.array - x.array.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)

    def bw(t):
        def run():
            g = t._grad
            dot = (g * p).sum(axis=ax, keepdims=True)
            x._accumulate(p * (g - dot))

        return run

    return _make(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} must match last dim {d}"
        )
    mu = x.array.mean(axis=-1, keepdims=True)
    var = x.array.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.array - mu) * inv
    out = xhat * gain.array + bias.array

    def bw(t):
        def run():
            g = t._grad
            gy = g * gain.array
            gdot = gy.mean(axis=-1, keepdims=True)
            xdot = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - gdot - xhat * xdot))
            axes = tuple(range(g.ndim - 1))
            gain._accumulate((g * xhat).sum(axis=axes))
            bias._accumulate(g.sum(axis=axes))

        return run

    return _make(out, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf Gaussian error linear unit: 0.5*x*(1+erf(x/sqrt(2)))."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.array * _INV_SQRT2))
    out = x.array * cdf

    def bw(t):
        def run():
            pdf = np.exp(-0.5 * x.array * x.array) * _INV_SQRT2PI
            x._accumulate(t._grad * (cdf + x.array * pdf))

        return run

    return _make(out, (x,), bw)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-d logits, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= target_index < k:
        raise IndexError(f"cross_entropy target {target_index} out of range [0, {k})")
    logp = _log_softmax_np(logits.array)
    out = np.asarray(-logp[target_index])

    def bw(t):
        def run():
            g = np.exp(logp)
            g[target_index] -= 1.0
            logits._accumulate(g * t._grad)

        return run

    return _make(out, (logits,), bw)


def mean_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of per-row -log softmax(row)[target] over 2-d logits."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"mean_cross_entropy expects 2-d logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} must be ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"mean_cross_entropy target out of range [0, {k})")
    logp = _log_softmax_np(logits.array)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean())

    def bw(t):
        def run():
            g = np.exp(logp)
            g[rows, targets] -= 1.0
            logits._accumulate(g * (t._grad / n))

        return run

    return _make(out, (logits,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    out = x.array * keep

    def bw(t):
        def run():
            x._accumulate(t._grad * keep)

        return run

    return _make(out, (x,), bw)
