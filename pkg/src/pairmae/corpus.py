"""Synthetic moving-sprite clips with exact patch correspondence, plus
ingestion of user-supplied frame directories and frame-pair sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


class IngestionError(ValueError):
    """A frames directory or manifest could not be loaded."""


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    patch: int = 8
    n_sprites: int = 3
    sprite: int = 16
    velocities: tuple = ((8, 0), (0, 8), (-8, 8))  # (vx, vy) px/frame per sprite
    length: int = 56
    texture_seed: int = 0

    def __post_init__(self):
        if self.canvas % self.patch != 0:
            raise ValueError("canvas must be divisible by patch")
        if self.sprite % self.patch != 0:
            raise ValueError("sprite must be a multiple of patch")
        if self.sprite > self.canvas:
            raise ValueError("sprite larger than canvas")
        if len(self.velocities) != self.n_sprites:
            raise ValueError("one velocity per sprite required")
        for v in self.velocities:
            if int(v[0]) != v[0] or int(v[1]) != v[1]:
                raise ValueError("velocities must be integer pixels/frame")
        if self.length < 1:
            raise ValueError("clip length must be >= 1")


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    patch: int | None = None
    # sprite kinematics for the correspondence oracle (synthetic clips only)
    sprite_pos: np.ndarray | None = None  # [S, T, 2] top-left (y, x)
    sprite_size: int | None = None

    def __len__(self):
        return self.frames.shape[0]

    @property
    def has_oracle(self):
        return self.sprite_pos is not None

    def _patch_owner(self, t):
        """Grid of topmost fully-covering sprite index per patch, -1 where a
        patch is background or straddles/occluded by another sprite."""
        p = self.patch
        h, w = self.frames.shape[1:3]
        gh, gw = h // p, w // p
        owner = np.full((gh, gw), -1, dtype=np.int64)
        s_sz = self.sprite_size
        for s in range(self.sprite_pos.shape[0]):
            y, x = self.sprite_pos[s, t]
            # patches fully inside this sprite become owned by it
            r0, r1 = -(-y // p), (y + s_sz) // p  # ceil, floor
            c0, c1 = -(-x // p), (x + s_sz) // p
            owner[r0:r1, c0:c1] = s
            # patches partially overlapped by a later sprite are ambiguous
            pr0, pr1 = y // p, -(-(y + s_sz) // p)
            pc0, pc1 = x // p, -(-(x + s_sz) // p)
            partial = np.zeros_like(owner, dtype=bool)
            partial[pr0:pr1, pc0:pc1] = True
            partial[r0:r1, c0:c1] = False
            owner[partial & (owner != s)] = -1
        return owner

    def correspondence(self, t1, t2):
        """Patch-grid map frame t1 -> t2 for sprite patches whose displacement
        is an exact multiple of the patch size. Returns {(r, c): (r, c)}."""
        if not self.has_oracle:
            return None
        p = self.patch
        own1, own2 = self._patch_owner(t1), self._patch_owner(t2)
        gh, gw = own1.shape
        out = {}
        for r in range(gh):
            for c in range(gw):
                s = own1[r, c]
                if s < 0:
                    continue
                dy, dx = self.sprite_pos[s, t2] - self.sprite_pos[s, t1]
                if dy % p or dx % p:
                    continue
                r2, c2 = r + dy // p, c + dx // p
                if 0 <= r2 < gh and 0 <= c2 < gw and own2[r2, c2] == s:
                    out[(r, c)] = (int(r2), int(c2))
        return out


@dataclass
class FramePair:
    frame_a: np.ndarray  # [H, W, 3] float32 in [0, 1]
    frame_b: np.ndarray
    gap: int
    correspondence: dict | None = None


def _smooth(img, passes=2):
    for _ in range(passes):
        img = (
            img
            + np.roll(img, 1, 0)
            + np.roll(img, -1, 0)
            + np.roll(img, 1, 1)
            + np.roll(img, -1, 1)
        ) / 5.0
    return img


def generate_clip(spec: SceneSpec, seed: int) -> VideoClip:
    """Deterministic clip for (spec, seed): seeded smoothed-noise background,
    uniquely textured sprites on constant-speed trajectories that reflect off
    the canvas border, so motion persists for the whole clip."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, spec.texture_seed]))
    c, s_sz, t = spec.canvas, spec.sprite, spec.length

    coarse = rng.random((c // 4, c // 4, 3))
    background = _smooth(np.kron(coarse, np.ones((4, 4, 1))))
    background = background.clip(0.0, 1.0).astype(np.float32)

    textures = rng.random((spec.n_sprites, s_sz, s_sz, 3)).astype(np.float32)
    start = rng.integers(0, c - s_sz + 1, size=(spec.n_sprites, 2))  # (y, x)
    vel = np.array([(vy, vx) for vx, vy in spec.velocities], dtype=np.int64)

    steps = np.arange(t)[None, :, None]
    raw = start[:, None, :] + vel[:, None, :] * steps
    span = c - s_sz
    if span == 0:
        pos = np.zeros_like(raw)
    else:
        # triangle-wave fold: bounce between 0 and span
        m = np.mod(raw, 2 * span)
        pos = np.where(m > span, 2 * span - m, m)

    frames = np.repeat(background[None], t, axis=0)
    for ti in range(t):
        for s in range(spec.n_sprites):
            y, x = pos[s, ti]
            frames[ti, y : y + s_sz, x : x + s_sz] = textures[s]
    return VideoClip(frames=frames, patch=spec.patch, sprite_pos=pos, sprite_size=s_sz)


def sample_frame_pair(clip: VideoClip, max_gap: int, rng, static: bool = False) -> FramePair:
    """Uniform start frame, then uniform gap in [1, min(max_gap, remaining)].
    Static mode repeats a single uniformly chosen frame with gap 0."""
    t = len(clip)
    if static:
        t1 = int(rng.integers(0, t))
        return FramePair(
            clip.frames[t1], clip.frames[t1], 0, clip.correspondence(t1, t1)
        )
    if t < 2:
        raise ValueError("clip must have at least 2 frames")
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    t1 = int(rng.integers(0, t - 1))
    gap = int(rng.integers(1, min(max_gap, t - 1 - t1) + 1))
    return FramePair(
        clip.frames[t1], clip.frames[t1 + gap], gap, clip.correspondence(t1, t1 + gap)
    )


def shared_random_resized_crop(pair: FramePair, out_size: int, rng, scale=(0.5, 1.0)) -> FramePair:
    """Crop both frames with one shared square window (area fraction drawn
    from `scale`), then nearest-resize to out_size. Drops the correspondence
    oracle since patch alignment is no longer exact."""
    h = pair.frame_a.shape[0]
    frac = rng.uniform(scale[0], scale[1])
    side = max(1, min(h, int(round(h * np.sqrt(frac)))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, h - side + 1))
    idx = np.minimum((np.arange(out_size) * side / out_size).astype(np.int64), side - 1)

    def crop(f):
        window = f[top : top + side, left : left + side]
        return window[idx][:, idx]

    return FramePair(crop(pair.frame_a), crop(pair.frame_b), pair.gap, None)


def load_frames_dir(manifest_path: str) -> list[VideoClip]:
    """Load clips listed in a manifest: one directory per line, '#' comments,
    paths relative to the manifest. Frames are 8-bit PNG or binary PPM read in
    lexicographic order and scaled to [0, 1]."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read manifest {manifest_path}: {e}") from e
    clips = []
    for line in lines:
        entry = line.split("#", 1)[0].strip()
        if not entry:
            continue
        d = entry if os.path.isabs(entry) else os.path.join(base, entry)
        if not os.path.isdir(d):
            raise IngestionError(f"not a directory: {d}")
        names = sorted(
            n for n in os.listdir(d) if n.lower().endswith((".png", ".ppm"))
        )
        if not names:
            raise IngestionError(f"no frames in {d}")
        frames = []
        for n in names:
            path = os.path.join(d, n)
            try:
                img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
            except OSError as e:
                raise IngestionError(f"unreadable frame {path}: {e}") from e
            if frames and img.shape != frames[0].shape:
                raise IngestionError(
                    f"frame size {img.shape[:2]} in {path} differs from "
                    f"{frames[0].shape[:2]}"
                )
            frames.append(img / 255.0)
        clips.append(VideoClip(frames=np.stack(frames)))
    return clips
