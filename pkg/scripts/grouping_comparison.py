#!/usr/bin/env python3
"""Desk-scale grouping comparison.

Trains one small model per grouping method on the same corpus and reports
validation bpp side by side, in the shape of the published CIFAR-10
comparison.  The reference row is reported numbers from full-scale training
elsewhere; the desk-scale numbers are not expected to match it, only the
table shape is comparable.
"""

import argparse
import tempfile
from pathlib import Path

from mspc.network import NetConfig
from mspc.training import REFERENCE_BPP, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True, help="directory of .ppm/.png images")
    ap.add_argument("--out", default=None, help="where to keep runs (default: temp)")
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--mixtures", type=int, default=2)
    ap.add_argument("--scales", type=int, default=2)
    ap.add_argument("--groups", type=int, default=3)
    ap.add_argument("--crop", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out_root = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="grouping_cmp_"))
    results = {}
    for method in ("random", "fixed_a", "fixed_b", "dynamic"):
        net = NetConfig(width=args.width, mixtures=args.mixtures, scales=args.scales,
                        resblocks=2, grouping=method, groups=args.groups, seed=args.seed)
        cfg = TrainConfig(net=net, data_dir=args.data, out_dir=str(out_root / method),
                          lr=args.lr, batch_size=args.batch_size, crop=args.crop,
                          epochs=args.epochs, seed=args.seed)
        res = train(cfg)
        results[method] = res.best_val_bpp
        print(f"{method}: best validation {res.best_val_bpp:.3f} bpp "
              f"({len(res.history)} epochs)")

    print()
    print(f"{'':<18}{'random':>10}{'fixed_a':>10}{'fixed_b':>10}{'dynamic':>10}")
    print(f"{'this run (bpp)':<18}" + "".join(
        f"{results[m]:>10.3f}" for m in ("random", "fixed_a", "fixed_b", "dynamic")))
    ref = REFERENCE_BPP["cifar10_grouping"]
    print(f"{'reference (bpp)':<18}" + "".join(
        f"{ref[m]:>10.2f}" for m in ("random", "fixed_a", "fixed_b", "dynamic")))
    print("reference row: reported full-scale CIFAR-10 results, shown for context only")


if __name__ == "__main__":
    main()
