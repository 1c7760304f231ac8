"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the twin-frame autoencoder needs: matmul, row softmax,
layer norm, GELU, elementwise arithmetic, reductions, reshapes and
gather/scatter along the token axis. No general broadcasting beyond bias-add
over leading dimensions; every other shape mismatch raises ShapeError.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

NEG_INF = float("-inf")

_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A forward op produced NaN/Inf where finiteness is required."""


class DegenerateRowError(ValueError):
    """softmax_rows received a row that is entirely -inf."""


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_check_finite(flag: bool) -> None:
    """Enable per-op finiteness checks (slow; meant for tests)."""
    global _check_finite
    _check_finite = bool(flag)


def _finite_ok(arr, allow_neg_inf=False):
    if not _check_finite:
        return
    if allow_neg_inf:
        bad = np.isnan(arr).any() or np.isposinf(arr).any()
    else:
        bad = not np.isfinite(arr).all()
    if bad:
        raise NumericError("non-finite value in forward pass")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all shape policing lives in the functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Reverse pass from a scalar; accumulates into .grad of leaves."""
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _wrap(data, parents, backward):
    if _grad_enabled and any(
        p.requires_grad or p._parents for p in parents
    ):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data + b
        _finite_ok(c)
        return _wrap(c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        c = a.data + b.data
        _finite_ok(c)
        return _wrap(c, (a, b), lambda g: (g, g))
    # bias-add: b broadcast over leading dims of a
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        c = a.data + b.data
        _finite_ok(c)
        axes = tuple(range(a.ndim - 1))
        return _wrap(c, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -b)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data * b
        _finite_ok(c)
        return _wrap(c, (a,), lambda g: (g * b,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    c = a.data * b.data
    _finite_ok(c)
    return _wrap(c, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for a of rank >= 2 and b either rank 2 (shared weights) or the
    same rank as a with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape} vs {b.shape}")
    if b.ndim == 2:
        c = a.data @ b.data
        _finite_ok(c)

        def back(g):
            da = g @ b.data.T
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return da, db

        return _wrap(c, (a, b), back)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    c = a.data @ b.data
    _finite_ok(c)

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _wrap(c, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _wrap(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """a[..., i, ...] along the given axis (used to split fused qkv)."""
    out = np.take(a.data, i, axis=axis)

    def back(g):
        da = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = i
        da[tuple(sl)] = g
        return (da,)

    return _wrap(out, (a,), back)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return _wrap(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * phi
    _finite_ok(out)

    def back(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (phi + x * pdf),)

    return _wrap(out, (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax over the last axis. -inf entries map to exactly 0;
    a row that is entirely -inf is rejected."""
    x = a.data
    _finite_ok(x, allow_neg_inf=True)
    m = x.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("softmax_rows: row with no finite entry")
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m)
    e[np.isneginf(x)] = 0.0
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        gy = g * y
        return (gy - y * gy.sum(axis=-1, keepdims=True),)

    return _wrap(y, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last extent")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data
    _finite_ok(out)

    def back(g):
        axes = tuple(range(a.ndim - 1))
        dg = (g * xhat).sum(axis=axes)
        db = g.sum(axis=axes)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dg, db

    return _wrap(out, (a, gain, bias), back)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select token rows. a: [N, D] with idx [n] (duplicates allowed), or
    [B, N, D] with idx [B, n] unique within each sample."""
    if a.ndim == 2 and idx.ndim == 1:
        out = a.data[idx]

        def back(g):
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            return (da,)

        return _wrap(out, (a,), back)
    if a.ndim == 3 and idx.ndim == 2:
        out = np.take_along_axis(a.data, idx[:, :, None], axis=1)

        def back(g):
            da = np.zeros_like(a.data)
            np.put_along_axis(da, idx[:, :, None], g, axis=1)
            return (da,)

        return _wrap(out, (a,), back)
    raise ShapeError(f"gather_rows: bad ranks {a.shape}, {idx.shape}")


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of base with rows written at idx along the token axis.
    base: [B, N, D], idx: [B, n], rows: [B, n, D]; idx unique per sample."""
    if base.ndim != 3 or idx.ndim != 2 or rows.ndim != 3:
        raise ShapeError("scatter_rows: expects [B,N,D], [B,n], [B,n,D]")
    if rows.shape[:2] != idx.shape or rows.shape[2] != base.shape[2]:
        raise ShapeError(f"scatter_rows: shapes {base.shape}, {idx.shape}, {rows.shape}")
    out = base.data.copy()
    np.put_along_axis(out, idx[:, :, None], rows.data, axis=1)

    def back(g):
        dbase = g.copy()
        np.put_along_axis(dbase, idx[:, :, None], 0.0, axis=1)
        drows = np.take_along_axis(g, idx[:, :, None], axis=1)
        return dbase, drows

    return _wrap(out, (base, rows), back)


def expand(vec: Tensor, shape) -> Tensor:
    """Broadcast a [D] vector to an arbitrary leading shape + [D]."""
    if vec.ndim != 1 or tuple(shape)[-1] != vec.shape[0]:
        raise ShapeError(f"expand: {vec.shape} to {shape}")
    out = np.broadcast_to(vec.data, shape).copy()
    axes = tuple(range(len(shape) - 1))
    return _wrap(out, (vec,), lambda g: (g.sum(axis=axes),))


def suppress(a: Tensor, mask: np.ndarray) -> Tensor:
    """Set entries where mask is True to -inf (pre-softmax score dropout).
    No gradient flows through suppressed entries."""
    if mask.shape != a.shape:
        raise ShapeError(f"suppress: mask shape {mask.shape} vs {a.shape}")
    out = np.where(mask, NEG_INF, a.data)
    return _wrap(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def trunc_normal(shape, std, rng, dtype=np.float32):
    """Truncated normal in [-2 std, 2 std] via rejection resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)
