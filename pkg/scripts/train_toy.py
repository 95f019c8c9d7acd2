#!/usr/bin/env python3
"""Quick trainability demonstrations on synthetic corpora.

Runs the two smoke experiments the acceptance suite uses: constant-colour
memorization and 16x16 natural-crop compression, printing the loss curves.
"""

import argparse
import time

import numpy as np

from mspc import tensor as T
from mspc.network import NetConfig, ProgressiveModel
from mspc.optim import adam_step, clip_global_norm
from mspc.training import batch_loss


def constant_run(steps, lr):
    rng = np.random.default_rng(3)
    colors = rng.integers(0, 256, (40, 3), dtype=np.uint8)
    crops = np.stack([np.full((8, 8, 3), c, dtype=np.uint8) for c in colors])
    model = ProgressiveModel(NetConfig(width=8, mixtures=2, scales=2, resblocks=2, seed=11))
    print(f"constant-colour corpus, {steps} steps at lr {lr:g}")
    for step in range(steps):
        loss, info = batch_loss(crops, model)
        grads = T.grads_of(loss, model.store.params)
        grads, _ = clip_global_norm(grads, 5.0)
        adam_step(model.store, grads, lr)
        if (step + 1) % max(1, steps // 10) == 0:
            print(f"  step {step + 1:5d}: {info['model_bpp']:7.3f} bpp (model bits only)")


def natural_run(seconds, lr):
    import skimage.data as skd

    rng = np.random.default_rng(9)
    sources = [skd.astronaut(), skd.coffee(), skd.chelsea(), skd.cat(), skd.rocket()]
    crops = []
    for _ in range(500):
        src = sources[int(rng.integers(0, len(sources)))]
        r = int(rng.integers(0, src.shape[0] - 16))
        c = int(rng.integers(0, src.shape[1] - 16))
        crops.append(src[r:r + 16, c:c + 16])
    crops = np.stack(crops)
    held, train_set = crops[:64], crops[64:]
    model = ProgressiveModel(NetConfig(width=8, mixtures=2, scales=2, resblocks=2, seed=4))
    print(f"natural 16x16 crops, {seconds}s budget at lr {lr:g} (raw baseline 24 bpp)")
    t0 = time.time()
    step = 0
    while time.time() - t0 < seconds:
        batch = train_set[rng.integers(0, len(train_set), 16)]
        loss, _ = batch_loss(batch, model)
        grads = T.grads_of(loss, model.store.params)
        grads, _ = clip_global_norm(grads, 5.0)
        adam_step(model.store, grads, lr)
        step += 1
        if step % 200 == 0:
            with T.no_grad():
                _, info = batch_loss(held, model)
            print(f"  step {step:5d} ({time.time() - t0:4.0f}s): "
                  f"held-out {info['model_bpp'] + info['raw_bpp']:6.2f} bpp")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--experiment", choices=["constant", "natural", "both"], default="both")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seconds", type=int, default=180)
    ap.add_argument("--lr", type=float, default=None)
    args = ap.parse_args()

    if args.experiment in ("constant", "both"):
        constant_run(args.steps, args.lr or 2e-2)
    if args.experiment in ("natural", "both"):
        natural_run(args.seconds, args.lr or 2e-3)


if __name__ == "__main__":
    main()
