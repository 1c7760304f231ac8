"""Command-line entry point: pretrain, stats, probe, heatmap, reconstruct,
gen-data. A TOML config file supplies defaults; flags override; every run
persists its fully resolved config as JSON."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import corpus as cp
from . import model as mdl
from . import probes as pb
from . import trainer as tr

OUT_ROOT_ENV = "PAIRMAE_OUT_ROOT"
MODES = ("asad", "random", "none", "static")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_out(path):
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _guard_overwrite(paths, force):
    for p in paths:
        if os.path.exists(p) and not force:
            raise UsageError(f"refusing to overwrite {p} (use --force)")


def _load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_train_config(args) -> tr.TrainConfig:
    raw = _load_config_file(args.config) if args.config else {}
    scene = cp.SceneSpec(**{
        **raw.get("scene", {}),
        **({"velocities": tuple(tuple(v) for v in raw["scene"]["velocities"])}
           if "velocities" in raw.get("scene", {}) else {}),
    })
    data_kw = dict(raw.get("data", {}))
    model_kw = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))

    if args.mode is not None:
        if args.mode == "static":
            data_kw["static"] = True
            model_kw["mode"] = "none"
        else:
            data_kw["static"] = False
            model_kw["mode"] = args.mode
    if args.p is not None:
        model_kw["p"] = args.p
    if args.asad_in_encoder:
        model_kw["apply_to_encoder"] = True
    if args.no_identity_embed:
        model_kw["use_identity"] = False
    if args.max_gap is not None:
        data_kw["max_gap"] = args.max_gap
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.steps is not None:
        train_kw["steps"] = args.steps
    if args.batch is not None:
        train_kw["batch"] = args.batch
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.checkpoint_every is not None:
        train_kw["checkpoint_every"] = args.checkpoint_every

    return tr.TrainConfig(
        model=mdl.ModelConfig(**model_kw),
        data=tr.DatasetConfig(scene=scene, **data_kw),
        out_dir=_resolve_out(args.out),
        **train_kw,
    )


def _emit_resolved_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump({"config": tr.config_to_dict(cfg), "hash": tr.config_hash(cfg)},
                  fh, indent=2, sort_keys=True)
    return path


def cmd_pretrain(args):
    cfg = build_train_config(args)
    _guard_overwrite(
        [os.path.join(cfg.out_dir, n) for n in ("metrics.csv", "final.ckpt")],
        args.force or args.resume is not None,
    )
    _emit_resolved_config(cfg, cfg.out_dir)
    final, metrics = tr.train(cfg, resume=args.resume,
                              log=lambda s: print(s, file=sys.stderr))
    print(json.dumps({"checkpoint": final, "metrics": metrics}))
    return 0


def cmd_stats(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    stats = pb.decoder_attention_stats(ckpt, args.samples, eval_seed=args.seed)
    csv = stats.to_csv()
    if args.out:
        out = _resolve_out(args.out)
        _guard_overwrite([out], args.force)
        with open(out, "w") as fh:
            fh.write(csv)
    else:
        sys.stdout.write(csv)
    return 0


def cmd_probe(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    data = ckpt.config.data
    if args.max_gap is not None:
        data = dataclasses.replace(data, max_gap=args.max_gap)
    report = pb.matching_probe(ckpt, data, args.pairs, seed=args.seed)
    print(report.to_json())
    return 0


def _pair_from_checkpoint(ckpt, seed):
    rng = tr.stream_rng(seed, tr.S_EVAL, 99)
    clip = cp.generate_clip(ckpt.config.data.scene, int(rng.integers(0, 2**31 - 1)))
    return cp.sample_frame_pair(clip, ckpt.config.data.max_gap, rng,
                                static=ckpt.config.data.static)


def cmd_heatmap(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    layer = args.layer if args.layer is not None else ckpt.config.model.dec_depth - 1
    pair = _pair_from_checkpoint(ckpt, args.seed)
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, f"ftem_{s}.png") for s in "ab"]
    _guard_overwrite(paths, args.force)
    map_a, map_b = pb.ftem_heatmap(ckpt, pair, layer)
    pb.write_gray_png(paths[0], map_a)
    pb.write_gray_png(paths[1], map_b)
    print(json.dumps({"outputs": paths, "layer": layer}))
    return 0


def cmd_reconstruct(args):
    ckpt = tr.load_checkpoint(args.checkpoint)
    pair = _pair_from_checkpoint(ckpt, args.seed)
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    rng = tr.stream_rng(args.seed, tr.S_EVAL, 98)
    images = pb.reconstruct_demo(ckpt, pair, rng)
    names = [k for k in images if k != "mask"]
    paths = {k: os.path.join(out_dir, f"{k}.png") for k in names}
    _guard_overwrite(list(paths.values()), args.force)
    for k in names:
        pb.write_rgb_png(paths[k], images[k])
    print(json.dumps({"outputs": sorted(paths.values())}))
    return 0


def cmd_gen_data(args):
    out_dir = _resolve_out(args.out)
    manifest = os.path.join(out_dir, "manifest.txt")
    _guard_overwrite([manifest], args.force)
    os.makedirs(out_dir, exist_ok=True)
    scene = cp.SceneSpec()
    lines = []
    for i in range(args.clips):
        rng = tr.stream_rng(args.seed, tr.S_CORPUS, i)
        clip = cp.generate_clip(scene, int(rng.integers(0, 2**31 - 1)))
        d = os.path.join(out_dir, f"clip{i:04d}")
        os.makedirs(d, exist_ok=True)
        for t in range(len(clip)):
            pb.write_rgb_png(os.path.join(d, f"frame{t:04d}.png"), clip.frames[t])
        lines.append(f"clip{i:04d}")
    with open(manifest, "w") as fh:
        fh.write("# one clip directory per line\n")
        fh.write("\n".join(lines) + "\n")
    print(json.dumps({"manifest": manifest, "clips": args.clips}))
    return 0


def make_parser() -> _Parser:
    p = _Parser(prog="pairmae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("pretrain", help="run masked-autoencoder pre-training")
    tp.add_argument("--config", help="TOML config file")
    tp.add_argument("--mode", choices=MODES)
    tp.add_argument("--p", type=float, help="attention dropout ratio")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--out", required=True)
    tp.add_argument("--steps", type=int)
    tp.add_argument("--batch", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--max-gap", type=int)
    tp.add_argument("--asad-in-encoder", action="store_true")
    tp.add_argument("--no-identity-embed", action="store_true")
    tp.add_argument("--checkpoint-every", type=int)
    tp.add_argument("--resume", help="checkpoint to continue from")
    tp.add_argument("--workers", type=int, default=1)
    tp.add_argument("--force", action="store_true")
    tp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("stats", help="within/between-frame attention statistics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_stats)

    pp = sub.add_parser("probe", help="ground-truth temporal matching probe")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--pairs", type=int, default=32)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--max-gap", type=int)
    pp.set_defaults(fn=cmd_probe)

    hp = sub.add_parser("heatmap", help="temporal-matching heatmap PNGs")
    hp.add_argument("--checkpoint", required=True)
    hp.add_argument("--layer", type=int)
    hp.add_argument("--seed", type=int, default=0)
    hp.add_argument("--out", required=True)
    hp.add_argument("--force", action="store_true")
    hp.set_defaults(fn=cmd_heatmap)

    rp = sub.add_parser("reconstruct", help="reconstruction demo PNGs")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--out", required=True)
    rp.add_argument("--force", action="store_true")
    rp.set_defaults(fn=cmd_reconstruct)

    gp = sub.add_parser("gen-data", help="write a synthetic corpus to disk")
    gp.add_argument("--out", required=True)
    gp.add_argument("--clips", type=int, default=8)
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--force", action="store_true")
    gp.set_defaults(fn=cmd_gen_data)
    return p


def run(argv) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))
