#!/usr/bin/env python3
"""Ablation grid: train {asad, none, random, static} x seeds, then score each
run with a cross-frame patch-matching probe and decoder attention-mass stats.

Results accumulate incrementally in <out>/results.json so a partial grid can
be inspected while later runs are still training.

Usage:
    python scripts/ablation_grid.py --steps 2000 --seeds 0 1 2 --out /tmp/grid
"""

import argparse
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pairmae import model as mdl
from pairmae import probes as pb
from pairmae import trainer as tr
from pairmae.corpus import SceneSpec

MODES = ("asad", "none", "random", "static")


def grid_config(mode, seed, steps, lr, out_dir):
    # Mirrors the equal-budget ablation grid in tests/test_acceptance.py:
    # compact model over full-size clips, frame pairs up to 50 steps apart.
    attn_mode = "none" if mode == "static" else mode
    model = mdl.ModelConfig(input_size=64, patch=8, enc_depth=2, enc_dim=64,
                            enc_heads=4, dec_depth=2, dec_dim=32, dec_heads=4,
                            mask_ratio=0.75, p=0.1, mode=attn_mode)
    data = tr.DatasetConfig(scene=SceneSpec(), n_clips=32, max_gap=50,
                            augment=False, static=(mode == "static"))
    return tr.TrainConfig(model=model, data=data, batch=16, epochs=1000,
                          warmup_epochs=10, seed=seed, steps=steps, base_lr=lr,
                          out_dir=out_dir)


def probe_dataset():
    # Two-frame clips with diagonal one-patch motion: every oracle
    # correspondence has a nonzero displacement, so positional similarity
    # alone scores zero and the probe isolates learned temporal matching.
    scene = SceneSpec(canvas=64, patch=8, n_sprites=3, sprite=16,
                      velocities=((8, 8), (-8, 8), (8, -8)), length=2)
    return tr.DatasetConfig(scene=scene, n_clips=32, max_gap=1, augment=False)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=6e-3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-pairs", type=int, default=128)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    results_path = os.path.join(args.out, "results.json")
    results = {}
    if os.path.exists(results_path):
        with open(results_path) as fh:
            results = json.load(fh)

    probe_data = probe_dataset()
    for seed in args.seeds:
        for mode in MODES:
            key = f"{mode}-s{seed}"
            if key in results:
                continue
            out = os.path.join(args.out, key)
            cfg = grid_config(mode, seed, args.steps, args.lr, out)
            print(f"training {key} ...", file=sys.stderr)
            final, _ = tr.train(cfg)
            ckpt = tr.load_checkpoint(final)
            report = pb.matching_probe(ckpt, probe_data,
                                       n_pairs=args.n_pairs, seed=123)
            stats = pb.decoder_attention_stats(ckpt, n_samples=16, eval_seed=99)
            results[key] = {
                "mode": mode, "seed": seed,
                "probe_accuracy": report.accuracy,
                "between_mean": float(np.mean(stats.between)),
                "between_per_layer": stats.between,
            }
            with open(results_path, "w") as fh:
                json.dump(results, fh, indent=2)
            print(f"{key}: probe={report.accuracy:.3f} "
                  f"between={results[key]['between_mean']:.4f}")

    for mode in MODES:
        accs = [r["probe_accuracy"] for r in results.values()
                if r["mode"] == mode]
        bet = [r["between_mean"] for r in results.values()
               if r["mode"] == mode]
        if accs:
            print(f"{mode:7s} probe={np.mean(accs):.3f} "
                  f"between={np.mean(bet):.4f} (n={len(accs)})")


if __name__ == "__main__":
    main()
