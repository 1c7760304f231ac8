#!/usr/bin/env python3
"""Train an attention-dropout model and a plain twin-frame baseline with the
same budget, then compare per-layer between-frame decoder attention mass.

Usage:
    python scripts/attention_shift.py --steps 2000 --seed 0 --out /tmp/shift
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pairmae import model as mdl
from pairmae import probes as pb
from pairmae import trainer as tr
from pairmae.corpus import SceneSpec


def mini_train_config(mode, seed, steps, lr, out_dir):
    # Mirrors the equal-budget ablation grid in tests/test_acceptance.py:
    # compact model over full-size clips, frame pairs up to 50 steps apart.
    model = mdl.ModelConfig(input_size=64, patch=8, enc_depth=2, enc_dim=64,
                            enc_heads=4, dec_depth=2, dec_dim=32, dec_heads=4,
                            mask_ratio=0.75, p=0.1, mode=mode)
    data = tr.DatasetConfig(scene=SceneSpec(), n_clips=32, max_gap=50,
                            augment=False)
    return tr.TrainConfig(model=model, data=data, batch=16, epochs=1000,
                          warmup_epochs=10, seed=seed, steps=steps, base_lr=lr,
                          out_dir=out_dir)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=6e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=32, help="eval forward passes")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    summary = {}
    for mode in ("asad", "none"):
        out = os.path.join(args.out, mode)
        cfg = mini_train_config(mode, args.seed, args.steps, args.lr, out)
        print(f"training mode={mode} ...", file=sys.stderr)
        final, _ = tr.train(cfg, log=lambda s: print(s, file=sys.stderr))
        stats = pb.decoder_attention_stats(tr.load_checkpoint(final),
                                           n_samples=args.samples)
        summary[mode] = {"between_per_layer": stats.between,
                         "between_mean": float(np.mean(stats.between))}
        print(f"{mode}: between per layer "
              + " ".join(f"{b:.4f}" for b in stats.between))

    rel = (summary["asad"]["between_mean"] / summary["none"]["between_mean"] - 1.0)
    summary["relative_gain"] = rel
    print(f"between-frame mass relative gain (asad vs none): {rel:+.1%}")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
