"""Twin-frame masked autoencoder: transformer encoder over visible tokens,
lightweight decoder over the full sequence with mask tokens, linear pixel
head, and the normalized-pixel reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import attention as att
from . import tokenizer as tok
from .corpus import FramePair

CHANNELS = 3


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    patch: int = 8
    enc_depth: int = 4
    enc_dim: int = 192
    enc_heads: int = 4
    dec_depth: int = 4
    dec_dim: int = 96
    dec_heads: int = 4
    mask_ratio: float = 0.75
    p: float = 0.1
    mode: str = "asad"  # asad | random | none
    apply_to_encoder: bool = False
    use_identity: bool = True
    precision: str = "f32"  # f32 | f64

    def __post_init__(self):
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("widths must be divisible by head counts")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask ratio must be in (0, 1)")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout ratio must be in [0, 1)")
        if self.mode not in att.MODES:
            raise ValueError(f"mode must be one of {att.MODES}")
        if self.input_size % self.patch:
            raise ValueError("input size must be divisible by patch")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def grid(self):
        g = self.input_size // self.patch
        return (g, g)

    @property
    def tokens_per_frame(self):
        g = self.grid
        return g[0] * g[1]

    @property
    def layout(self):
        return tok.FrameLayout(tokens_per_frame=self.tokens_per_frame, grid=self.grid)

    @property
    def patch_dim(self):
        return self.patch * self.patch * CHANNELS

    @property
    def n_masked(self):
        return int(np.floor(self.mask_ratio * self.layout.total_tokens))


@dataclass
class Block:
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    attn: att.AttentionParams
    ln2_g: T.Tensor
    ln2_b: T.Tensor
    mlp_w1: T.Tensor
    mlp_b1: T.Tensor
    mlp_w2: T.Tensor
    mlp_b2: T.Tensor

    @staticmethod
    def create(dim, heads, rng, dtype):
        ones = lambda: T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        zeros = lambda n: T.Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        return Block(
            ln1_g=ones(), ln1_b=zeros(dim),
            attn=att.AttentionParams.create(dim, heads, rng, dtype),
            ln2_g=ones(), ln2_b=zeros(dim),
            mlp_w1=T.Tensor(T.trunc_normal((dim, 4 * dim), 0.02, rng, dtype), requires_grad=True),
            mlp_b1=zeros(4 * dim),
            mlp_w2=T.Tensor(T.trunc_normal((4 * dim, dim), 0.02, rng, dtype), requires_grad=True),
            mlp_b2=zeros(dim),
        )

    def run(self, x, mode="none", p=0.0, rng_for=None, layout=None,
            frame_vec=None, cell_vec=None, stats_out=None,
            drop_mask=None, drop_out=None):
        a = T.layer_norm(x, self.ln1_g, self.ln1_b)
        a = att.masked_self_attention(
            a, self.attn, layout, mode=mode, p=p, rng_for=rng_for,
            frame_vec=frame_vec, cell_vec=cell_vec, stats_out=stats_out,
            drop_mask=drop_mask, drop_out=drop_out,
        )
        x = T.add(x, a)
        m = T.layer_norm(x, self.ln2_g, self.ln2_b)
        m = T.add(T.matmul(m, self.mlp_w1), self.mlp_b1)
        m = T.gelu(m)
        m = T.add(T.matmul(m, self.mlp_w2), self.mlp_b2)
        return T.add(x, m)


@dataclass
class ModelParams:
    embed: tok.EmbedParams
    enc_blocks: list
    dec_proj_w: T.Tensor
    dec_proj_b: T.Tensor
    dec_mask_token: T.Tensor
    dec_ident: T.Tensor
    dec_pos: np.ndarray  # fixed [N/2, dec_dim]
    dec_blocks: list
    head_w: T.Tensor
    head_b: T.Tensor

    @staticmethod
    def create(config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE]))
        dt = config.dtype
        tn = lambda shape: T.Tensor(T.trunc_normal(shape, 0.02, rng, dt), requires_grad=True)
        zeros = lambda n: T.Tensor(np.zeros(n, dtype=dt), requires_grad=True)
        return ModelParams(
            embed=tok.EmbedParams.create(config.patch_dim, config.enc_dim, config.grid, rng, dt),
            enc_blocks=[
                Block.create(config.enc_dim, config.enc_heads, rng, dt)
                for _ in range(config.enc_depth)
            ],
            dec_proj_w=tn((config.enc_dim, config.dec_dim)),
            dec_proj_b=zeros(config.dec_dim),
            dec_mask_token=tn((config.dec_dim,)),
            dec_ident=tn((2, config.dec_dim)),
            dec_pos=tok.sincos_pos_table(config.grid, config.dec_dim).astype(dt),
            dec_blocks=[
                Block.create(config.dec_dim, config.dec_heads, rng, dt)
                for _ in range(config.dec_depth)
            ],
            head_w=tn((config.dec_dim, config.patch_dim)),
            head_b=zeros(config.patch_dim),
        )

    def named_parameters(self):
        out = [
            ("embed.proj_w", self.embed.proj_w),
            ("embed.proj_b", self.embed.proj_b),
            ("embed.mask_token", self.embed.mask_token),
            ("embed.frame_ident", self.embed.frame_ident),
        ]

        def block_params(prefix, blocks):
            for i, blk in enumerate(blocks):
                for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b",
                             "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
                    out.append((f"{prefix}.{i}.{name}", getattr(blk, name)))
                for name in ("qkv_w", "qkv_b", "out_w", "out_b"):
                    out.append((f"{prefix}.{i}.attn.{name}", getattr(blk.attn, name)))

        block_params("enc", self.enc_blocks)
        out += [
            ("dec_proj_w", self.dec_proj_w),
            ("dec_proj_b", self.dec_proj_b),
            ("dec_mask_token", self.dec_mask_token),
            ("dec_ident", self.dec_ident),
        ]
        block_params("dec", self.dec_blocks)
        out += [("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def param_count(self):
        return sum(p.data.size for _, p in self.named_parameters())


def expected_param_count(config: ModelConfig) -> int:
    """Parameter count as pure arithmetic over the config."""
    def block(d):
        return 4 * d + (d * 3 * d + 3 * d + d * d + d) + (d * 4 * d + 4 * d + 4 * d * d + d)

    e, d, pd = config.enc_dim, config.dec_dim, config.patch_dim
    n = pd * e + e  # patch projection
    n += e + 2 * e  # encoder-side mask token + frame identity vectors
    n += config.enc_depth * block(e)
    n += e * d + d  # latent -> decoder width
    n += d + 2 * d  # decoder mask token + identity vectors
    n += config.dec_depth * block(d)
    n += d * pd + pd  # pixel head
    return n


def encode(vis_tokens: T.Tensor, params: ModelParams, config: ModelConfig,
           rng_for=None, frame_vec=None, cell_vec=None, stats_out=None,
           frozen_drops=None, drop_out=None) -> T.Tensor:
    """Pre-norm transformer stack over visible tokens [B, n_vis, enc_dim]."""
    mode = config.mode if (config.apply_to_encoder and config.mode == "asad") else "none"
    x = vis_tokens
    for li, blk in enumerate(params.enc_blocks):
        lr = (lambda b, h, _li=li: rng_for(_li, b, h)) if callable(rng_for) else rng_for
        x = blk.run(
            x, mode=mode, p=config.p if mode != "none" else 0.0, rng_for=lr,
            layout=config.layout, frame_vec=frame_vec, cell_vec=cell_vec,
            stats_out=stats_out,
            drop_mask=frozen_drops[li] if frozen_drops is not None else None,
            drop_out=drop_out,
        )
    return x


def decode(latent: T.Tensor, masks, params: ModelParams, config: ModelConfig,
           rng_for=None, stats_out=None, frozen_drops=None, drop_out=None) -> T.Tensor:
    """Project latent to decoder width, insert the decoder mask token at
    masked slots, add positional (+ identity) embeddings, run decoder blocks
    with the configured dropout mode, and map every token to pixel space."""
    b = latent.shape[0]
    n = config.layout.total_tokens
    half = config.tokens_per_frame
    dt = config.dtype

    proj = T.add(T.matmul(latent, params.dec_proj_w), params.dec_proj_b)
    base = T.expand(params.dec_mask_token, (b, n, config.dec_dim))
    vis = np.stack([m.visible(n) for m in masks])
    x = T.scatter_rows(base, vis, proj)

    pos = np.concatenate([params.dec_pos, params.dec_pos], axis=0)
    x = T.add(x, T.Tensor(np.broadcast_to(pos, (b, n, config.dec_dim)).astype(dt)))
    if config.use_identity:
        onehot = np.zeros((b, n, 2), dtype=dt)
        onehot[:, half:, 1] = 1.0
        onehot[:, :half, 0] = 1.0
        x = T.add(x, T.matmul(T.Tensor(onehot), params.dec_ident))

    mode = config.mode
    for li, blk in enumerate(params.dec_blocks):
        lr = (lambda b_, h_, _li=li: rng_for(_li, b_, h_)) if callable(rng_for) else rng_for
        x = blk.run(
            x, mode=mode, p=config.p, rng_for=lr, layout=config.layout,
            stats_out=stats_out,
            drop_mask=frozen_drops[li] if frozen_drops is not None else None,
            drop_out=drop_out,
        )
    return T.add(T.matmul(x, params.head_w), params.head_b)


def reconstruction_loss(predictions: T.Tensor, targets: np.ndarray, mask: tok.MaskSet) -> T.Tensor:
    """MSE over masked tokens only, per-sample surface: predictions [N, pd]."""
    if len(mask.masked) == 0:
        raise ValueError("mask is empty")
    pred = T.gather_rows(predictions, mask.masked)
    diff = T.sub(pred, T.Tensor(targets.astype(predictions.dtype)))
    return T.tmean(T.mul(diff, diff))


def batch_loss(predictions: T.Tensor, targets: np.ndarray, mask_idx: np.ndarray) -> T.Tensor:
    """MSE over masked tokens for a batch: predictions [B, N, pd],
    targets [B, M, pd], mask_idx [B, M]."""
    pred = T.gather_rows(predictions, mask_idx)
    diff = T.sub(pred, T.Tensor(targets.astype(predictions.dtype)))
    return T.tmean(T.mul(diff, diff))


def forward_batch(pairs, config: ModelConfig, params: ModelParams, mask_rngs,
                  drop_rng_enc=None, drop_rng_dec=None, masks=None,
                  frozen_drops=None, capture_drops=False):
    """Full pipeline over a list of FramePairs: patchify, mask, embed, encode,
    decode, loss. Returns (loss Tensor, diagnostics dict)."""
    layout = config.layout
    n = layout.total_tokens
    patch_rows = []
    for pair in pairs:
        patches, lay = tok.patchify(pair, config.patch)
        if lay != layout:
            raise ValueError("frame pair does not match configured geometry")
        patch_rows.append(patches)
    patches_b = np.stack(patch_rows).astype(config.dtype)
    if masks is None:
        masks = [tok.sample_mask(layout, config.mask_ratio, r) for r in mask_rngs]

    vis_tokens = tok.embed_batch(
        patches_b, masks, params.embed, layout, "encoder", config.use_identity
    )
    enc_frame = enc_cell = None
    if config.apply_to_encoder:
        frame_full, cell_full = att._frame_vectors(layout)
        vis = np.stack([m.visible(n) for m in masks])
        enc_frame, enc_cell = frame_full[vis], cell_full[vis]

    enc_stats: list = []
    enc_drops: list | None = [] if capture_drops else None
    dec_drops: list | None = [] if capture_drops else None
    latent = encode(
        vis_tokens, params, config, rng_for=drop_rng_enc,
        frame_vec=enc_frame, cell_vec=enc_cell,
        stats_out=enc_stats if config.apply_to_encoder else None,
        frozen_drops=frozen_drops["enc"] if frozen_drops else None,
        drop_out=enc_drops,
    )
    dec_stats: list = []
    predictions = decode(latent, masks, params, config, rng_for=drop_rng_dec,
                         stats_out=dec_stats,
                         frozen_drops=frozen_drops["dec"] if frozen_drops else None,
                         drop_out=dec_drops)

    targets = np.stack([tok.normalize_targets(p, m) for p, m in zip(patch_rows, masks)])
    mask_idx = np.stack([m.masked for m in masks])
    loss = batch_loss(predictions, targets, mask_idx)
    diagnostics = {
        "dec_stats": dec_stats,
        "enc_stats": enc_stats,
        "masks": masks,
        "predictions": predictions,
        "targets": targets,
        "enc_drops": enc_drops,
        "dec_drops": dec_drops,
    }
    return loss, diagnostics


def forward_pretrain(pair: FramePair, config: ModelConfig, params: ModelParams, rng):
    """Single-pair convenience wrapper around forward_batch; `rng` drives the
    mask draw and any attention dropout sampling."""
    return forward_batch([pair], config, params, [rng],
                         drop_rng_enc=rng, drop_rng_dec=rng)
