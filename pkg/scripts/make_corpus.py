#!/usr/bin/env python3
"""Build a small PPM corpus for training/eval experiments.

Crops come from the scikit-image sample photographs, optionally mixed with
constant-colour and noise images for smoke runs.
"""

import argparse
from pathlib import Path

import numpy as np

from mspc.imageio import write_ppm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--kind", choices=["natural", "constant", "noise"], default="natural")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    if args.kind == "natural":
        import skimage.data as skd

        sources = [skd.astronaut(), skd.coffee(), skd.chelsea(), skd.cat(), skd.rocket()]
        for i in range(args.count):
            src = sources[int(rng.integers(0, len(sources)))]
            r = int(rng.integers(0, src.shape[0] - args.size))
            c = int(rng.integers(0, src.shape[1] - args.size))
            write_ppm(out / f"nat{i:04d}.ppm", np.ascontiguousarray(src[r:r + args.size, c:c + args.size]))
    elif args.kind == "constant":
        for i in range(args.count):
            color = rng.integers(0, 256, 3, dtype=np.uint8)
            write_ppm(out / f"const{i:04d}.ppm", np.full((args.size, args.size, 3), color, np.uint8))
    else:
        for i in range(args.count):
            write_ppm(out / f"noise{i:04d}.ppm",
                      rng.integers(0, 256, (args.size, args.size, 3), dtype=np.uint8))
    print(f"wrote {args.count} {args.kind} images of {args.size}x{args.size} to {out}")


if __name__ == "__main__":
    main()
