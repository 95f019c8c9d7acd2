"""Command-line surface: encode, decode, train, eval, bench, inspect.

Every command is non-interactive, deterministic for fixed inputs and seeds,
and supports --json for machine-readable output.  Exit codes: 0 success,
1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class DataError(RuntimeError):
    """Anything wrong with inputs, models, or streams (exit code 2)."""


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MSPC_THREADS", "1")))
    except ValueError:
        return 1


def _load_model(path: str):
    from .checkpoint import CheckpointError, load_checkpoint
    from .network import ProgressiveModel

    try:
        cfg, store, digest = load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    except CheckpointError as e:
        raise DataError(f"{path}: {e}") from e
    return ProgressiveModel(cfg, store), digest


def _profile_for(name: str | None, model, patch: int | None):
    from .profiles import PROFILES, custom_profile

    cfg = model.cfg
    if name is None:
        for prof in PROFILES.values():
            if (prof.scales, prof.width, prof.mixtures) == (cfg.scales, cfg.width, cfg.mixtures):
                name = prof.name
                break
        else:
            name = "custom"
    if name == "custom":
        return custom_profile(cfg.width, cfg.mixtures, cfg.scales, cfg.resblocks,
                              cfg.grouping, cfg.groups, patch or 496)
    if name not in PROFILES:
        raise DataError(f"unknown profile {name!r}; available: {sorted(PROFILES)} or custom")
    prof = PROFILES[name]
    if (prof.scales, prof.width, prof.mixtures) != (cfg.scales, cfg.width, cfg.mixtures):
        raise DataError(
            f"profile {name!r} expects scales={prof.scales} width={prof.width} "
            f"mixtures={prof.mixtures}, but the checkpoint has scales={cfg.scales} "
            f"width={cfg.width} mixtures={cfg.mixtures}")
    return prof


def _emit(args, payload: dict, text_lines: list[str]):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _load_images_arg(path: str) -> list[tuple[str, np.ndarray]]:
    from .imageio import load_image

    p = Path(path)
    if p.is_dir():
        files = sorted(x for x in p.iterdir() if x.suffix.lower() in (".ppm", ".png"))
        if not files:
            raise DataError(f"no .ppm/.png images in {p}")
        return [(f.name, load_image(f)) for f in files]
    if not p.exists():
        raise DataError(f"image not found: {p}")
    return [(p.name, load_image(p))]


# -- commands ------------------------------------------------------------------


def cmd_encode(args) -> int:
    from .codec import CodeStats, encode_image

    model, digest = _load_model(args.model)
    prof = _profile_for(args.profile, model, args.patch)
    images = _load_images_arg(args.input)
    if len(images) != 1:
        raise DataError("encode takes a single image, not a directory")
    name, image = images[0]
    stats = CodeStats()
    t0 = time.perf_counter()
    blob = encode_image(image, model, digest, profile=prof, grouping=args.grouping,
                        patch_size=args.patch, groups=args.groups, seed=args.seed,
                        threads=args.threads, stats=stats)
    wall = time.perf_counter() - t0
    Path(args.out).write_bytes(blob)
    h, w = image.shape[:2]
    bpp = 8 * len(blob) / (h * w)
    per_scale = {s: round(v["ideal_bits"], 1) for s, v in sorted(stats.per_scale().items())}
    payload = {
        "command": "encode", "input": name, "out": args.out,
        "width": w, "height": h, "bytes": len(blob),
        "bpp": bpp, "bits_per_subpixel": bpp / 3.0,
        "seconds": wall, "profile": prof.name,
        "grouping": args.grouping or prof.grouping,
        "per_scale_bits": per_scale, "raw_bits": stats.raw_bits,
    }
    _emit(args, payload, [
        f"{name}: {w}x{h} -> {len(blob)} bytes",
        f"bpp: {bpp:.4f}  bits/subpixel: {bpp / 3:.4f}  wall: {wall:.2f}s",
        f"per-scale coded bits: {per_scale}  raw-scale bits: {stats.raw_bits}",
    ])
    return EXIT_OK


def cmd_decode(args) -> int:
    from .coder import CorruptStreamError
    from .codec import ModelMismatchError, decode_image
    from .container import ContainerFormatError, IntegrityError
    from .imageio import write_ppm

    model, digest = _load_model(args.model)
    blob = _read_stream(args.input)
    t0 = time.perf_counter()
    try:
        image = decode_image(blob, model, digest, threads=args.threads)
    except (ModelMismatchError, IntegrityError, ContainerFormatError, CorruptStreamError) as e:
        raise DataError(str(e)) from e
    wall = time.perf_counter() - t0
    write_ppm(args.out, image)
    payload = {"command": "decode", "out": args.out, "width": image.shape[1],
               "height": image.shape[0], "seconds": wall}
    _emit(args, payload, [f"decoded {image.shape[1]}x{image.shape[0]} -> {args.out} ({wall:.2f}s)"])
    return EXIT_OK


def _read_stream(path: str) -> bytes:
    p = Path(path)
    if not p.exists():
        raise DataError(f"stream not found: {p}")
    return p.read_bytes()


def cmd_train(args) -> int:
    from .network import NetConfig
    from .profiles import PROFILES
    from .training import TrainConfig, TrainingError, train

    if args.profile and args.profile != "custom":
        if args.profile not in PROFILES:
            raise DataError(f"unknown profile {args.profile!r}")
        prof = PROFILES[args.profile]
        net = prof.net_config(seed=args.seed, grouping=args.grouping or prof.grouping,
                              groups=args.groups or prof.groups)
    else:
        net = NetConfig(width=args.width, mixtures=args.mixtures, scales=args.scales,
                        resblocks=args.resblocks, grouping=args.grouping or "fixed_a",
                        groups=args.groups or 3, seed=args.seed)
    cfg = TrainConfig(net=net, data_dir=args.data, out_dir=args.out, lr=args.lr,
                      batch_size=args.batch_size, crop=args.crop, epochs=args.epochs,
                      seed=args.seed, max_steps=args.max_steps)
    try:
        result = train(cfg)
    except (TrainingError, FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from e
    payload = {
        "command": "train", "epochs_run": len(result.history),
        "steps": result.steps, "best_val_bpp": result.best_val_bpp,
        "best_checkpoint": result.best_path, "last_checkpoint": result.last_path,
        "diverged": result.diverged, "clip_events": result.clip_events,
        "history": result.history,
    }
    lines = [f"epoch {row['epoch']}: train {row['train_bpp']:.3f} bpp, "
             f"val {row['val_bpp']:.3f} bpp, lr {row['lr']:.2e}" for row in result.history]
    lines.append(("training diverged; kept last good checkpoint at " if result.diverged
                  else "best checkpoint: ") + result.best_path)
    _emit(args, payload, lines)
    return EXIT_OK if not result.diverged else EXIT_DATA


def cmd_eval(args) -> int:
    from .training import evaluate

    model, digest = _load_model(args.model)
    prof = _profile_for(args.profile, model, args.patch)
    named = _load_images_arg(args.data)
    report = evaluate([img for _n, img in named], model, digest, profile=prof,
                      grouping=args.grouping, seed=args.seed, threads=args.threads)
    lines = [f"{'image':<24}{'bpp':>9}{'bits/sub':>10}{'model bpp':>11}{'overhead':>10}"]
    for (name, _), row in zip(named, report["images"]):
        lines.append(f"{name:<24}{row['bpp']:>9.4f}{row['bits_per_subpixel']:>10.4f}"
                     f"{row['model_bpp']:>11.4f}{row['overhead_bits']:>10.1f}")
    lines.append(f"{'mean':<24}{report['mean_bpp']:>9.4f}"
                 f"{report['mean_bits_per_subpixel']:>10.4f}{report['mean_model_bpp']:>11.4f}")
    lines.append("")
    lines.append("reference results (reported elsewhere; shown for context, not asserted):")
    for dataset, rows in report["reference"].items():
        cite = "  ".join(f"{k} {v}" for k, v in rows.items())
        lines.append(f"  {dataset}: {cite}")
    _emit(args, {"command": "eval", **report}, lines)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .codec import decode_image, encode_image

    model, digest = _load_model(args.model)
    prof = _profile_for(args.profile, model, args.patch)
    named = _load_images_arg(args.input)
    rows = []
    for name, image in named:
        h, w = image.shape[:2]
        norm = 1024.0 / (h * w)  # seconds per 32x32 pixels
        enc_times, dec_times = [], []
        blob = b""
        for run in range(args.runs + 1):
            t0 = time.perf_counter()
            blob = encode_image(image, model, digest, profile=prof, seed=args.seed,
                                threads=args.threads)
            te = time.perf_counter() - t0
            t0 = time.perf_counter()
            out = decode_image(blob, model, digest, threads=args.threads)
            td = time.perf_counter() - t0
            if not np.array_equal(out, image):
                raise DataError(f"{name}: round trip mismatch during benchmark")
            if run:  # first run is warmup
                enc_times.append(te)
                dec_times.append(td)
        rows.append({
            "image": name, "pixels": h * w,
            "encode_s_per_32x32": float(np.mean(enc_times) * norm),
            "decode_s_per_32x32": float(np.mean(dec_times) * norm),
            "encode_s": float(np.mean(enc_times)),
            "decode_s": float(np.mean(dec_times)),
            "bpp": 8 * len(blob) / (h * w),
        })
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            wtr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wtr.writeheader()
            wtr.writerows(rows)
    reference = {
        "L3C": {"encode": 0.0078, "decode": 0.0070},
        "SReC": {"encode": 0.025, "decode": 0.025},
        "normal (reference)": {"encode": 0.031, "decode": 0.029},
        "big (reference)": {"encode": 0.052, "decode": 0.049},
        "extra (reference)": {"encode": 0.074, "decode": 0.070},
    }
    lines = [f"{'image':<24}{'enc s/32x32':>13}{'dec s/32x32':>13}{'bpp':>9}"]
    for r in rows:
        lines.append(f"{r['image']:<24}{r['encode_s_per_32x32']:>13.4f}"
                     f"{r['decode_s_per_32x32']:>13.4f}{r['bpp']:>9.3f}")
        if r["decode_s"] > 2.0 * r["encode_s"]:
            lines.append(f"  note: {r['image']} decode exceeded 2x encode time")
    lines.append("")
    lines.append("reference timings, seconds per 32x32 (reported elsewhere, other hardware):")
    for k, v in reference.items():
        lines.append(f"  {k}: encode {v['encode']}, decode {v['decode']}")
    _emit(args, {"command": "bench", "runs": args.runs, "images": rows,
                 "reference": reference}, lines)
    return EXIT_OK


def cmd_inspect(args) -> int:
    import zlib

    from .container import ContainerFormatError, parse

    blob = _read_stream(args.file)
    try:
        info, payloads, raws = parse(blob)
    except ContainerFormatError as e:
        raise DataError(str(e)) from e
    patches = []
    for i, (payload, raw, crc) in enumerate(zip(payloads, raws, info.crcs)):
        ok = zlib.crc32(raw, zlib.crc32(payload)) == crc
        patches.append({"patch": i, "payload_bytes": len(payload),
                        "raw_bytes": len(raw), "crc32": f"{crc:08x}", "crc_ok": ok})
    payload = {
        "command": "inspect", "width": info.width, "height": info.height,
        "scales": info.scales, "profile_id": info.profile_id,
        "grouping": info.grouping, "patch_size": info.patch_size,
        "groups_per_scale": list(info.groups_per_scale), "seed": info.seed,
        "model_hash": info.model_hash.hex(), "flags": info.flags,
        "patches": patches, "total_bytes": len(blob),
    }
    lines = [
        f"dimensions: {info.width}x{info.height}  scales: {info.scales}  "
        f"grouping: {info.grouping}  patch: {info.patch_size}",
        f"groups/scale: {list(info.groups_per_scale)}  seed: {info.seed}",
        f"model hash: {info.model_hash.hex()}",
    ]
    for p in patches:
        flag = "ok" if p["crc_ok"] else "MISMATCH"
        lines.append(f"patch {p['patch']}: payload {p['payload_bytes']} B, "
                     f"raw {p['raw_bytes']} B, crc {p['crc32']} {flag}")
    _emit(args, payload, lines)
    if not all(p["crc_ok"] for p in patches):
        print("checksum mismatch detected", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- wiring --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mspc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, profile=True):
        if model:
            p.add_argument("--model", required=True, help="checkpoint path")
        if profile:
            p.add_argument("--profile", help="normal | big | extra | custom")
            p.add_argument("--patch", type=int, help="override patch size")
            p.add_argument("--grouping", choices=["random", "fixed_a", "fixed_b", "dynamic"])
            p.add_argument("--groups", type=int, help="group count for random/dynamic")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=_default_threads())
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("encode", help="compress an image losslessly")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct the exact image from a stream")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    common(p, profile=False)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile")
    p.add_argument("--grouping", choices=["random", "fixed_a", "fixed_b", "dynamic"])
    p.add_argument("--groups", type=int)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--mixtures", type=int, default=2)
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--resblocks", type=int, default=2)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="cross-entropy and realized bpp over images")
    p.add_argument("--data", required=True, help="image file or directory")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="encode/decode timing, seconds per 32x32")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--runs", type=int, default=5, help="timed runs after 1 warmup")
    p.add_argument("--csv", help="also write rows to this CSV file")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="dump stream header and patch records")
    p.add_argument("--file", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as e:
        print(f"mspc {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
