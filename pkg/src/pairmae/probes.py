"""Instrumentation over a trained model: within/between-frame decoder
attention statistics, temporal-matching heatmaps, a nearest-neighbor patch
correspondence probe against synthetic ground truth, and reconstruction
dumps."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import corpus as cp
from . import model as mdl
from . import tensor as T
from . import tokenizer as tok
from . import trainer as tr


@dataclass
class AttentionStats:
    within: list  # mean within-frame row mass per decoder layer
    between: list
    n_samples: int

    def to_csv(self) -> str:
        lines = ["layer,within_mass,between_mass"]
        for i, (w, b) in enumerate(zip(self.within, self.between)):
            lines.append(f"{i},{w!r},{b!r}")
        return "\n".join(lines) + "\n"


@dataclass
class ProbeReport:
    accuracy: float
    n_pairs: int
    config_hash: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _eval_model_config(config: mdl.ModelConfig) -> mdl.ModelConfig:
    """Dropout disabled for probing."""
    return dataclasses.replace(config, mode="none", p=0.0, apply_to_encoder=False)


def _no_mask(layout) -> tok.MaskSet:
    return tok.MaskSet(masked=np.empty(0, dtype=np.int64), ratio=0.0)


def decoder_attention_stats(ckpt: tr.Checkpoint, n_samples: int, eval_seed: int = 0) -> AttentionStats:
    """Within/between-frame decoder attention masses: forward
    passes with dropout off on masked inputs sampled exactly as in
    pre-training, averaged over heads, queries, and samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = ckpt.config
    mcfg = _eval_model_config(cfg.model)
    clips = tr.build_corpus(cfg)
    acc_w = acc_b = None
    for s in range(n_samples):
        rng = tr.stream_rng(eval_seed, tr.S_EVAL, s)
        clip = clips[int(rng.integers(0, len(clips)))]
        pair = cp.sample_frame_pair(clip, cfg.data.max_gap, rng, static=cfg.data.static)
        if cfg.data.augment:
            pair = cp.shared_random_resized_crop(pair, mcfg.input_size, rng)
        with T.no_grad():
            _, diag = mdl.forward_batch([pair], mcfg, ckpt.params, [rng])
        w = np.array([e["within"] for e in diag["dec_stats"]])
        b = np.array([e["between"] for e in diag["dec_stats"]])
        acc_w = w if acc_w is None else acc_w + w
        acc_b = b if acc_b is None else acc_b + b
    return AttentionStats(
        within=list(acc_w / n_samples), between=list(acc_b / n_samples), n_samples=n_samples
    )


def ftem_heatmap(ckpt: tr.Checkpoint, pair: cp.FramePair, layer: int):
    """Per-pixel temporal-matching map at one decoder layer, averaged over
    heads, with all tokens visible. Returns (map_a, map_b) in [0, 1] at the
    input frame resolution (nearest upsampling by the patch size)."""
    cfg = ckpt.config
    mcfg = _eval_model_config(cfg.model)
    if not 0 <= layer < mcfg.dec_depth:
        raise ValueError(f"decoder layer {layer} out of range")
    layout = mcfg.layout
    patches, lay = tok.patchify(pair, mcfg.patch)
    if lay != layout:
        raise ValueError("pair does not match checkpoint geometry")
    mask = _no_mask(layout)
    with T.no_grad():
        vis = tok.embed_batch(patches[None].astype(mcfg.dtype), [mask],
                              ckpt.params.embed, layout, "encoder", mcfg.use_identity)
        latent = mdl.encode(vis, ckpt.params, mcfg)
        stats: list = []
        mdl.decode(latent, [mask], ckpt.params, mcfg, stats_out=stats)
    f = stats[layer]["f_tem"][0].mean(axis=0)  # heads averaged, [N]
    half = layout.tokens_per_frame
    rows, cols = layout.grid
    p = mcfg.patch

    def upsample(vals):
        grid = vals.reshape(rows, cols).clip(0.0, 1.0)
        return np.kron(grid, np.ones((p, p)))

    return upsample(f[:half]), upsample(f[half:])


def write_gray_png(path, arr):
    img = (np.asarray(arr).clip(0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def write_rgb_png(path, arr):
    img = (np.asarray(arr).clip(0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def encoder_token_features(params: mdl.ModelParams, mcfg: mdl.ModelConfig, pair: cp.FramePair):
    """Final encoder-layer features of the fully visible two-frame sequence."""
    layout = mcfg.layout
    patches, _ = tok.patchify(pair, mcfg.patch)
    mask = _no_mask(layout)
    with T.no_grad():
        vis = tok.embed_batch(patches[None].astype(mcfg.dtype), [mask],
                              params.embed, layout, "encoder", mcfg.use_identity)
        latent = mdl.encode(vis, params, mcfg)
    return latent.data[0]  # [N, enc_dim]


def nn_match_accuracy(feats: np.ndarray, layout: tok.FrameLayout, correspondence: dict):
    """Cosine nearest-neighbor accuracy of frame-A sprite tokens against
    frame-B tokens; ties break toward the lowest index. Returns (hits, total)."""
    half = layout.tokens_per_frame
    cols = layout.grid[1]
    fa, fb = feats[:half], feats[half:]
    norm = lambda x: x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    sims = norm(fa) @ norm(fb).T  # [half, half]
    best = sims.argmax(axis=1)  # argmax takes the lowest index on ties
    hits = total = 0
    for (r, c), (r2, c2) in correspondence.items():
        total += 1
        if best[r * cols + c] == r2 * cols + c2:
            hits += 1
    return hits, total


def matching_probe(ckpt: tr.Checkpoint, probe_data: tr.DatasetConfig, n_pairs: int,
                   seed: int = 0) -> ProbeReport:
    """Ground-truth temporal matching probe: encode both frames fully visible,
    nearest-neighbor match frame-A sprite patches into frame B, and score
    against the synthetic correspondence oracle."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    mcfg = _eval_model_config(ckpt.config.model)
    layout = mcfg.layout
    hits = total = 0
    for i in range(n_pairs):
        rng = tr.stream_rng(seed, tr.S_EVAL, 1, i)
        clip = cp.generate_clip(probe_data.scene, int(rng.integers(0, 2**31 - 1)))
        pair = cp.sample_frame_pair(clip, probe_data.max_gap, rng)
        if pair.correspondence is None:
            raise ValueError("matching probe needs clips with a correspondence oracle")
        feats = encoder_token_features(ckpt.params, mcfg, pair)
        h, t = nn_match_accuracy(feats, layout, pair.correspondence)
        hits += h
        total += t
    if total == 0:
        raise ValueError("probe pairs contained no oracle patches")
    return ProbeReport(
        accuracy=hits / total, n_pairs=n_pairs,
        config_hash=tr.config_hash(ckpt.config), seed=seed,
    )


def reconstruct_demo(ckpt: tr.Checkpoint, pair: cp.FramePair, rng):
    """Masked reconstruction visualization. Returns a dict with, per frame,
    the original, the masked input (gray where masked), and the reconstruction
    (visible patches composited from the original; predictions de-normalized
    with the true per-patch target statistics)."""
    cfg = ckpt.config
    mcfg = _eval_model_config(cfg.model)
    layout = mcfg.layout
    patches, _ = tok.patchify(pair, mcfg.patch)
    mask = tok.sample_mask(layout, cfg.model.mask_ratio, rng)
    with T.no_grad():
        _, diag = mdl.forward_batch([pair], mcfg, ckpt.params, None, masks=[mask])
    pred = diag["predictions"].data[0]  # [N, patch_dim]

    mu = patches.mean(axis=1, keepdims=True)
    sd = np.sqrt(patches.var(axis=1, keepdims=True) + tok.TARGET_EPS)
    recon = patches.copy()
    recon[mask.masked] = pred[mask.masked] * sd[mask.masked] + mu[mask.masked]
    masked_img = patches.copy()
    masked_img[mask.masked] = 0.5

    half = layout.tokens_per_frame
    out = {}
    for fi, name in enumerate("ab"):
        sl = slice(fi * half, (fi + 1) * half)
        out[f"original_{name}"] = tok.unpatchify(patches[sl], layout, mcfg.patch)
        out[f"masked_{name}"] = tok.unpatchify(masked_img[sl], layout, mcfg.patch)
        out[f"reconstruction_{name}"] = tok.unpatchify(
            recon[sl].clip(0.0, 1.0), layout, mcfg.patch
        )
    out["mask"] = mask
    return out
