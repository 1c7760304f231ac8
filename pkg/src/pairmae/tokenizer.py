"""Frame pair -> concatenated token sequence: patchify, joint random masking,
linear patch embedding, fixed 2D sine-cosine positional table shared by both
frames, learnable frame identity vectors, and normalized pixel targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import FramePair

TARGET_EPS = 1e-6


@dataclass(frozen=True)
class FrameLayout:
    tokens_per_frame: int
    grid: tuple  # (rows, cols)

    @property
    def total_tokens(self):
        return 2 * self.tokens_per_frame

    def frame_of(self, i):
        return 0 if i < self.tokens_per_frame else 1

    def twin_of(self, i):
        """Token index at the same grid cell in the other frame."""
        half = self.tokens_per_frame
        return i + half if i < half else i - half


@dataclass(frozen=True)
class MaskSet:
    masked: np.ndarray  # sorted unique token indices over [0, N)
    ratio: float

    def visible(self, total):
        keep = np.ones(total, dtype=bool)
        keep[self.masked] = False
        return np.nonzero(keep)[0]


@dataclass
class EmbedParams:
    proj_w: T.Tensor  # [patch_dim, D]
    proj_b: T.Tensor  # [D]
    mask_token: T.Tensor  # [D]
    frame_ident: T.Tensor  # [2, D], learnable
    pos_table: np.ndarray  # [N/2, D], fixed

    @staticmethod
    def create(patch_dim, dim, grid, rng, dtype=np.float32):
        return EmbedParams(
            proj_w=T.Tensor(T.trunc_normal((patch_dim, dim), 0.02, rng, dtype), requires_grad=True),
            proj_b=T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            mask_token=T.Tensor(T.trunc_normal((dim,), 0.02, rng, dtype), requires_grad=True),
            frame_ident=T.Tensor(T.trunc_normal((2, dim), 0.02, rng, dtype), requires_grad=True),
            pos_table=sincos_pos_table(grid, dim).astype(dtype),
        )


def sincos_pos_table(grid, dim):
    """Fixed 2D sine-cosine positional table over one frame's patch grid."""
    if dim % 4 != 0:
        raise ValueError("embedding dim must be divisible by 4")
    rows, cols = grid
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def axis_embed(n):
        ang = np.arange(n)[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # [n, dim/2]

    er, ec = axis_embed(rows), axis_embed(cols)
    out = np.zeros((rows * cols, dim))
    out[:, : dim // 2] = np.repeat(er, cols, axis=0)
    out[:, dim // 2 :] = np.tile(ec, (rows, 1))
    return out


def patchify(pair: FramePair, patch_size: int):
    """Row-major non-overlapping patches; frame A rows first, then frame B.
    Returns (raw patches [N, p*p*3] float array, FrameLayout)."""
    h, w, ch = pair.frame_a.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"frame {h}x{w} not divisible by patch {patch_size}")
    rows, cols = h // patch_size, w // patch_size

    def split(frame):
        x = frame.reshape(rows, patch_size, cols, patch_size, ch)
        return x.transpose(0, 2, 1, 3, 4).reshape(rows * cols, -1)

    patches = np.concatenate([split(pair.frame_a), split(pair.frame_b)], axis=0)
    return patches, FrameLayout(tokens_per_frame=rows * cols, grid=(rows, cols))


def unpatchify(patches: np.ndarray, layout: FrameLayout, patch_size: int):
    """Inverse of patchify for one frame's worth of patch rows."""
    rows, cols = layout.grid
    ch = patches.shape[-1] // (patch_size * patch_size)
    x = patches.reshape(rows, cols, patch_size, patch_size, ch)
    return x.transpose(0, 2, 1, 3, 4).reshape(rows * patch_size, cols * patch_size, ch)


def sample_mask(layout: FrameLayout, ratio: float, rng) -> MaskSet:
    """Uniform subset of floor(ratio * N) tokens over the joint two-frame
    sequence; no per-frame quota."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must be in (0, 1)")
    n = layout.total_tokens
    count = int(np.floor(ratio * n))
    masked = np.sort(rng.choice(n, size=count, replace=False))
    return MaskSet(masked=masked, ratio=ratio)


def embed_batch(patches_b: np.ndarray, masks, params: EmbedParams,
                layout: FrameLayout, target: str, use_identity: bool = True) -> T.Tensor:
    """Batched token embeddings. patches_b is [B, N, patch_dim]; masks is one
    MaskSet per sample (visible counts are equal by construction).

    target='encoder': visible rows only, linearly projected.
    target='decoder': all N rows, with the shared mask token at masked rows.
    The fixed positional table (shared across frames) and, optionally, the
    learnable frame identity vector are added to every row either way."""
    if target not in ("encoder", "decoder"):
        raise ValueError("target must be 'encoder' or 'decoder'")
    b, n, _ = patches_b.shape
    half = layout.tokens_per_frame
    dtype = params.proj_w.dtype
    dim = params.mask_token.shape[0]
    pos_full = np.concatenate([params.pos_table, params.pos_table], axis=0)

    vis = np.stack([m.visible(n) for m in masks])  # [B, n_vis]
    px = np.take_along_axis(patches_b, vis[:, :, None], axis=1).astype(dtype)
    projv = T.add(T.matmul(T.Tensor(px), params.proj_w), params.proj_b)

    if target == "encoder":
        idx = vis
        rows = projv
    else:
        idx = np.broadcast_to(np.arange(n), (b, n))
        base = T.expand(params.mask_token, (b, n, dim))
        rows = T.scatter_rows(base, vis, projv)

    out = T.add(rows, T.Tensor(pos_full[idx].astype(dtype)))
    if use_identity:
        onehot = np.zeros((b, idx.shape[1], 2), dtype=dtype)
        onehot[..., 1] = idx >= half
        onehot[..., 0] = 1.0 - onehot[..., 1]
        out = T.add(out, T.matmul(T.Tensor(onehot), params.frame_ident))
    return out


def embed(patches, mask: MaskSet, params: EmbedParams, layout: FrameLayout,
          target: str, use_identity: bool = True) -> T.Tensor:
    """Single-sample view of embed_batch: [N, patch_dim] -> [rows, D]."""
    out = embed_batch(patches[None], [mask], params, layout, target, use_identity)
    return T.reshape(out, out.shape[1:])


def normalize_targets(patches: np.ndarray, mask: MaskSet) -> np.ndarray:
    """Per-patch mean/std normalized pixels for the masked rows."""
    sel = patches[mask.masked]
    mu = sel.mean(axis=1, keepdims=True)
    var = sel.var(axis=1, keepdims=True)
    return (sel - mu) / np.sqrt(var + TARGET_EPS)
