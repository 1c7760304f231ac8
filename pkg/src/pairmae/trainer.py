"""Pre-training loop: decoupled-weight-decay Adam, linear warmup + cosine
decay, whole-corpus epoch accounting, per-step CSV metrics, and a binary
checkpoint format that round-trips bit-exactly."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import corpus as cp
from . import model as mdl
from . import tensor as T

MAGIC = b"DMAE"
FORMAT_VERSION = 1
ADAM_EPS = 1e-8

# stream tags for derived rngs; every random draw in a run is a pure
# function of (seed, stream, counters) so resume is exact
S_CORPUS, S_PERM, S_DATA, S_MASK, S_DROP_ENC, S_DROP_DEC, S_EVAL = range(7)

METRICS_HEADER = "step,epoch,loss,lr,between_mass_mean"


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def stream_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class DatasetConfig:
    scene: cp.SceneSpec = cp.SceneSpec()
    n_clips: int = 8
    max_gap: int = 50
    static: bool = False
    augment: bool = False


@dataclass(frozen=True)
class TrainConfig:
    model: mdl.ModelConfig = mdl.ModelConfig()
    data: DatasetConfig = DatasetConfig()
    base_lr: float = 6e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch: int = 32
    epochs: int = 40
    warmup_epochs: int = 2
    seed: int = 0
    steps: int | None = None  # overrides the epoch-derived step count
    checkpoint_every: int = 0  # 0: only final
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup epochs must be < total epochs")

    @property
    def steps_per_epoch(self):
        return max(1, -(-self.data.n_clips // self.batch))

    @property
    def total_steps(self):
        if self.steps is not None:
            return self.steps
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    md = dict(d.pop("model"))
    dd = dict(d.pop("data"))
    scene = dict(dd.pop("scene"))
    scene["velocities"] = tuple(tuple(v) for v in scene["velocities"])
    return TrainConfig(
        model=mdl.ModelConfig(**md),
        data=DatasetConfig(scene=cp.SceneSpec(**scene), **dd),
        **d,
    )


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Schedule:
    base: float
    warmup_steps: int
    total_steps: int


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear 0 -> base over warmup, then half-cosine base -> 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base * step / schedule.warmup_steps
    span = max(1, schedule.total_steps - schedule.warmup_steps)
    t = min(step - schedule.warmup_steps, span)
    return 0.5 * schedule.base * (1.0 + math.cos(math.pi * t / span))


class AdamW:
    """Adam with decoupled weight decay; decay is scaled by the step lr so a
    zero learning rate leaves parameters untouched."""

    def __init__(self, named_params, beta1=0.9, beta2=0.95, weight_decay=0.05):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.weight_decay = beta1, beta2, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data = p.data - lr * ((m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


# ---------------------------------------------------------------- checkpoint

def _tensor_entries(params: mdl.ModelParams, opt: AdamW | None):
    entries = [(n, p.data) for n, p in params.named_parameters()]
    if opt is not None:
        entries += [(f"opt.m.{n}", a) for n, a in sorted(opt.m.items())]
        entries += [(f"opt.v.{n}", a) for n, a in sorted(opt.v.items())]
    return entries


def save_checkpoint(path, params: mdl.ModelParams, config: TrainConfig, step: int,
                    opt: AdamW | None = None):
    entries = _tensor_entries(params, opt)
    directory, offset = [], 0
    for name, arr in entries:
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset}
        )
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "train_config": config_to_dict(config),
        "config_hash": config_hash(config),
        "step": step,
        "opt_t": opt.t if opt is not None else 0,
        "rng_state": {"seed": config.seed, "step": step},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


@dataclass
class Checkpoint:
    config: TrainConfig
    params: mdl.ModelParams
    step: int
    opt_t: int
    moments: dict  # name -> (m, v)
    header: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    payload = raw[12 + hlen :]
    config = config_from_dict(header["train_config"])
    if header["config_hash"] != config_hash(config):
        raise CheckpointError(f"{path}: config hash mismatch")

    arrays = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        end = ent["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload for {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(
            payload, dtype=dt, count=count, offset=ent["offset"]
        ).reshape(ent["shape"]).copy()

    params = mdl.ModelParams.create(config.model, seed=config.seed)
    moments = {}
    for name, p in params.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        p.data = arrays[name]
        mk, vk = f"opt.m.{name}", f"opt.v.{name}"
        if mk in arrays:
            moments[name] = (arrays[mk], arrays[vk])
    return Checkpoint(
        config=config, params=params, step=header["step"],
        opt_t=header.get("opt_t", header["step"]), moments=moments, header=header,
    )


# ------------------------------------------------------------------ sampling

def build_corpus(cfg: TrainConfig) -> list:
    return [
        cp.generate_clip(
            cfg.data.scene,
            int(stream_rng(cfg.seed, S_CORPUS, i).integers(0, 2**31 - 1)),
        )
        for i in range(cfg.data.n_clips)
    ]


def clip_index_for(cfg: TrainConfig, global_sample: int) -> tuple[int, int]:
    """(epoch, clip index) for the g-th sample drawn; an epoch ends exactly
    when every clip has been drawn once."""
    n = cfg.data.n_clips
    epoch, pos = divmod(global_sample, n)
    perm = stream_rng(cfg.seed, S_PERM, epoch).permutation(n)
    return epoch, int(perm[pos])


def sample_batch(cfg: TrainConfig, clips, step: int):
    pairs = []
    for i in range(cfg.batch):
        g = step * cfg.batch + i
        _, ci = clip_index_for(cfg, g)
        rng = stream_rng(cfg.seed, S_DATA, step, i)
        pair = cp.sample_frame_pair(
            clips[ci], cfg.data.max_gap, rng, static=cfg.data.static
        )
        if cfg.data.augment:
            pair = cp.shared_random_resized_crop(pair, cfg.model.input_size, rng)
        pairs.append(pair)
    epoch = (step * cfg.batch) // cfg.data.n_clips
    return pairs, epoch


def drop_rng_factory(cfg: TrainConfig, stream: int, step: int):
    def factory(layer, b, h):
        return stream_rng(cfg.seed, stream, step, layer, b, h)

    return factory


# ------------------------------------------------------------------- training

def train(cfg: TrainConfig, resume: str | None = None, log=None):
    """Run pre-training; returns (final checkpoint path, metrics path)."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not os.access(cfg.out_dir, os.W_OK):
        raise TrainingError(f"output directory not writable: {cfg.out_dir}")
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    final_path = os.path.join(cfg.out_dir, "final.ckpt")

    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if config_hash(ck.config) != config_hash(cfg):
            raise CheckpointError("resume checkpoint was written by a different config")
        params = ck.params
        opt = AdamW(params.named_parameters(), cfg.beta1, cfg.beta2, cfg.weight_decay)
        for name, (m, v) in ck.moments.items():
            opt.m[name], opt.v[name] = m.copy(), v.copy()
        opt.t = ck.opt_t
        start_step = ck.step
    else:
        params = mdl.ModelParams.create(cfg.model, seed=cfg.seed)
        opt = AdamW(params.named_parameters(), cfg.beta1, cfg.beta2, cfg.weight_decay)

    clips = build_corpus(cfg)
    schedule = Schedule(cfg.base_lr, cfg.warmup_steps, cfg.total_steps)

    mode = "ab" if resume else "wb"
    with open(metrics_path, mode) as mf:
        if not resume:
            mf.write((METRICS_HEADER + "\n").encode())
        for step in range(start_step, cfg.total_steps):
            pairs, epoch = sample_batch(cfg, clips, step)
            mask_rngs = [stream_rng(cfg.seed, S_MASK, step, i) for i in range(cfg.batch)]
            loss, diag = mdl.forward_batch(
                pairs, cfg.model, params, mask_rngs,
                drop_rng_enc=drop_rng_factory(cfg, S_DROP_ENC, step),
                drop_rng_dec=drop_rng_factory(cfg, S_DROP_DEC, step),
            )
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                dump = os.path.join(cfg.out_dir, "abort_diagnostics.json")
                with open(dump, "w") as fh:
                    masses = [{"within": s["within"], "between": s["between"]}
                              for s in diag["dec_stats"]]
                    json.dump({"step": step, "loss": repr(loss_val),
                               "dec_stats": masses}, fh, indent=2)
                raise TrainingError(f"non-finite loss at step {step}; see {dump}")
            opt.zero_grad()
            loss.backward()
            lr = lr_at(step, schedule)
            opt.step(lr)

            between = float(np.mean([s["between"] for s in diag["dec_stats"]]))
            mf.write(f"{step},{epoch},{loss_val!r},{lr!r},{between!r}\n".encode())
            if log is not None and (step % 50 == 0 or step + 1 == cfg.total_steps):
                log(f"step {step} epoch {epoch} loss {loss_val:.4f} lr {lr:.2e}")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(cfg.out_dir, f"step{step + 1:06d}.ckpt"),
                    params, cfg, step + 1, opt,
                )
    save_checkpoint(final_path, params, cfg, cfg.total_steps, opt)
    return final_path, metrics_path
