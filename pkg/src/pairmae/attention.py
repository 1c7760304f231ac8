"""Multi-head self-attention with adaptive spatial-attention dropout.

Planning is done on detached attention probabilities: for each query the
temporal matching probability f_tem (its best attention onto the other
frame) scales the normalized within-frame attention into a dropout
probability matrix W; a fixed global budget of within-frame elements is then
sampled without replacement proportionally to W and suppressed with -inf
before the softmax. `random` mode suppresses the same budget uniformly over
all non-self positions; `none` is vanilla attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tokenizer import FrameLayout

MODES = ("asad", "random", "none")


@dataclass
class AttentionParams:
    qkv_w: T.Tensor  # [D, 3 * heads * head_dim]
    qkv_b: T.Tensor
    out_w: T.Tensor  # [heads * head_dim, D]
    out_b: T.Tensor
    heads: int
    head_dim: int

    @staticmethod
    def create(dim, heads, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        hd = dim // heads
        return AttentionParams(
            qkv_w=T.Tensor(T.trunc_normal((dim, 3 * dim), 0.02, rng, dtype), requires_grad=True),
            qkv_b=T.Tensor(np.zeros(3 * dim, dtype=dtype), requires_grad=True),
            out_w=T.Tensor(T.trunc_normal((dim, dim), 0.02, rng, dtype), requires_grad=True),
            out_b=T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            heads=heads,
            head_dim=hd,
        )


@dataclass
class AttentionMatrix:
    scores: T.Tensor  # pre-softmax q k^T / sqrt(head_dim), [N, N]
    probs: np.ndarray  # detached row-softmax of scores, [N, N]


def _frame_vectors(layout: FrameLayout):
    half = layout.tokens_per_frame
    frame = np.zeros(2 * half, dtype=np.int64)
    frame[half:] = 1
    cell = np.concatenate([np.arange(half), np.arange(half)])
    return frame, cell


def _softmax_np(a):
    m = a.max(axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=-1, keepdims=True)


def qkv_heads(z: T.Tensor, params: AttentionParams):
    """z [B, N, D] -> q, k, v each [B, heads, N, head_dim]."""
    b, n, _ = z.shape
    h, hd = params.heads, params.head_dim
    fused = T.add(T.matmul(z, params.qkv_w), params.qkv_b)
    fused = T.reshape(fused, (b, n, 3, h, hd))
    parts = [T.swapaxes(T.index_axis(fused, 2, i), 1, 2) for i in range(3)]
    return parts[0], parts[1], parts[2]


def attention_matrix(z: T.Tensor, params: AttentionParams, head: int) -> AttentionMatrix:
    """Scaled-dot-product score matrix and its detached row softmax for one
    head of a single [N, D] sequence."""
    if z.ndim != 2:
        raise T.ShapeError("attention_matrix expects a single [N, D] sequence")
    if not 0 <= head < params.heads:
        raise ValueError("head index out of range")
    q, k, _ = qkv_heads(T.reshape(z, (1,) + z.shape), params)
    qh = T.index_axis(T.index_axis(q, 0, 0), 0, head)
    kh = T.index_axis(T.index_axis(k, 0, 0), 0, head)
    scores = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(params.head_dim))
    return AttentionMatrix(scores=scores, probs=_softmax_np(scores.data))


def temporal_match_prob(a_hat: np.ndarray, layout: FrameLayout) -> np.ndarray:
    """f_tem[i]: max attention probability from query i onto any token of the
    other frame. a_hat is [..., N, N] row-stochastic."""
    frame, _ = _frame_vectors(layout)
    return _temporal_match(a_hat, frame)


def _temporal_match(a_hat, frame):
    other = frame[..., :, None] != frame[..., None, :]
    masked = np.where(other, a_hat, -1.0)
    f = masked.max(axis=-1)
    return np.maximum(f, 0.0)  # queries with no other-frame tokens get 0


def dropout_prob_matrix(a_hat: np.ndarray, f_tem: np.ndarray, layout: FrameLayout) -> np.ndarray:
    """W[i, j] = f_tem(i) * a_hat[i, j] / sum over the query's same-frame
    non-self columns; zero at self, temporal-self, and between-frame slots."""
    frame, cell = _frame_vectors(layout)
    return _dropout_probs(a_hat, f_tem, frame, cell)


def _dropout_probs(a_hat, f_tem, frame, cell):
    n = a_hat.shape[-1]
    same = frame[..., :, None] == frame[..., None, :]
    cand = same & ~np.eye(n, dtype=bool)
    spa = np.where(cand, a_hat, 0.0)
    denom = spa.sum(axis=-1, keepdims=True)
    has_cand = cand.any(axis=-1)
    if np.any((denom[..., 0] <= 0.0) & has_cand):
        raise RuntimeError("within-frame attention mass vanished for a row with candidates")
    w = f_tem[..., None] * spa / np.where(denom > 0.0, denom, 1.0)
    # temporal-self slots are between-frame, already zero; keep the explicit
    # guard so the invariant survives any layout change
    twin = (cell[..., :, None] == cell[..., None, :]) & ~same
    w[np.broadcast_to(twin, w.shape)] = 0.0
    return w


def drop_budget(p: float, n: int) -> int:
    """Global count of suppressed within-frame elements: floor(P * N * (N/2 - 1))."""
    return int(math.floor(p * n * (n // 2 - 1)))


def sample_drop_indices(w: np.ndarray, p: float, rng, n_d: int | None = None) -> np.ndarray:
    """Sample floor(P*N*(N/2-1)) distinct positions from the flattened W,
    without replacement, with probability proportional to W. Returns an
    [n_d, 2] array of (row, col) indices. Gumbel top-k keys realize the
    multinomial-without-replacement draw; zero-weight slots can never win."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout ratio must be in [0, 1)")
    n = w.shape[-1]
    if n_d is None:
        n_d = drop_budget(p, n)
    if n_d == 0:
        return np.empty((0, 2), dtype=np.int64)
    flat = w.reshape(-1)
    pos = flat > 0.0
    if n_d > int(pos.sum()):
        raise ValueError("drop budget exceeds positive-probability support")
    keys = np.full(flat.shape, -np.inf)
    u = rng.random(flat.shape[0])
    keys[pos] = np.log(flat[pos]) - np.log(-np.log(u[pos]))
    top = np.argpartition(keys, -n_d)[-n_d:]
    return np.stack(np.unravel_index(top, w.shape[-2:]), axis=1)


def _uniform_drop_indices(n: int, n_d: int, rng) -> np.ndarray:
    """n_d distinct non-self positions, uniform over within- and between-frame."""
    flat = np.flatnonzero(~np.eye(n, dtype=bool).reshape(-1))
    chosen = rng.choice(flat, size=n_d, replace=False)
    return np.stack(np.unravel_index(chosen, (n, n)), axis=1)


def masked_self_attention(
    z: T.Tensor,
    params: AttentionParams,
    layout: FrameLayout | None,
    mode: str = "none",
    p: float = 0.0,
    rng_for=None,
    frame_vec: np.ndarray | None = None,
    cell_vec: np.ndarray | None = None,
    stats_out: list | None = None,
    drop_mask: np.ndarray | None = None,
    drop_out: list | None = None,
) -> T.Tensor:
    """One attention layer over z [B, N, D].

    rng_for(b, h) supplies the per-sample, per-head generator used for drop
    sampling; a plain Generator is accepted and shared in fixed (b, h) order.
    frame_vec/cell_vec override the layout-derived token-to-frame map (used
    when attention runs over a visible-only subsequence). stats_out, when a
    list, receives per-layer within/between attention masses and f_tem.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    b, n, _ = z.shape
    h, hd = params.heads, params.head_dim
    if frame_vec is None:
        frame_vec, cell_vec = _frame_vectors(layout)
    frame_b = np.broadcast_to(frame_vec, (b,) + frame_vec.shape[-1:])
    cell_b = np.broadcast_to(cell_vec, (b,) + cell_vec.shape[-1:])

    q, k, v = qkv_heads(z, params)
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))

    if drop_mask is not None:
        # externally frozen plan (gradient checks, replay)
        if drop_mask.any():
            scores = T.suppress(scores, drop_mask)
        if drop_out is not None:
            drop_out.append(drop_mask)
    elif mode != "none" and p > 0.0:
        if isinstance(rng_for, np.random.Generator):
            shared = rng_for
            rng_for = lambda _b, _h: shared
        drop = np.zeros((b, h, n, n), dtype=bool)
        if mode == "asad":
            a_hat = _softmax_np(scores.data)  # detached planning path
            f_tem = _temporal_match(a_hat, frame_b[:, None, :])
            w = _dropout_probs(a_hat, f_tem, frame_b[:, None, :], cell_b[:, None, :])
        for bi in range(b):
            same = frame_b[bi][:, None] == frame_b[bi][None, :]
            n_d = int(math.floor(p * (same & ~np.eye(n, dtype=bool)).sum()))
            if n_d == 0:
                continue
            for hi in range(h):
                rng = rng_for(bi, hi)
                if mode == "asad":
                    idx = sample_drop_indices(w[bi, hi], p, rng, n_d=n_d)
                else:
                    idx = _uniform_drop_indices(n, n_d, rng)
                drop[bi, hi, idx[:, 0], idx[:, 1]] = True
        if drop.any():
            scores = T.suppress(scores, drop)
        if drop_out is not None:
            drop_out.append(drop)
    else:
        if drop_out is not None:
            drop_out.append(np.zeros((b, h, n, n), dtype=bool))

    probs = T.softmax_rows(scores)

    if stats_out is not None:
        same = frame_b[:, None, :, None] == frame_b[:, None, None, :]
        within = np.where(same, probs.data, 0.0).sum(axis=-1)
        stats_out.append({
            "within": float(within.mean()),
            "between": float(1.0 - within.mean()),
            "f_tem": _temporal_match(probs.data, frame_b[:, None, :]),  # [B, H, N]
        })

    ctx = T.matmul(probs, v)  # [B, H, N, hd]
    merged = T.reshape(T.swapaxes(ctx, 1, 2), (b, n, h * hd))
    return T.add(T.matmul(merged, params.out_w), params.out_b)
