"""End-to-end encode/decode orchestration.

One function drives a patch through the scale recursion and group loop; an
encode sink feeds true values in and writes symbols out, a decode sink reads
symbols and feeds decoded values back.  Both sides therefore execute the very
same forward passes and table quantization, which is what makes the stream
reversible: any divergence would show up as a checksum failure, never as a
silently wrong pixel.

The deepest scale is coded raw at 8 bits per sample (its pixels are treated
as independent and uniform); every other pixel is coded by the range coder
under the model's discretized mixture distribution.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container as cont
from . import dmol
from . import grouping as grp
from . import tensor as T
from .coder import RangeDecoder, RangeEncoder, quantize_pmf
from .network import NetConfig, ProgressiveModel, upsample_values
from .profiles import PROFILE_IDS, Profile
from .tensor import Tensor

_PMF_CHUNK = 768    # pixels per pmf/quantize block, bounds peak fp64 memory


class ModelMismatchError(ValueError):
    """The stream was produced with a different checkpoint."""


@dataclass
class GroupStats:
    scale: int
    group: int
    pixels: int
    ideal_bits: float = 0.0
    model_bits: float = 0.0
    floored: int = 0


@dataclass
class CodeStats:
    """Per-group and per-stream accounting collected while encoding."""

    groups: list[GroupStats] = field(default_factory=list)
    streams: list[dict] = field(default_factory=list)   # one entry per patch payload
    raw_bits: int = 0

    def merge(self, other: "CodeStats") -> None:
        self.groups.extend(other.groups)
        self.streams.extend(other.streams)
        self.raw_bits += other.raw_bits

    @property
    def payload_bits(self) -> int:
        return sum(s["payload_bits"] for s in self.streams)

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def ideal_bits(self) -> float:
        return sum(g.ideal_bits for g in self.groups)

    @property
    def model_bits(self) -> float:
        return sum(g.model_bits for g in self.groups)

    @property
    def floored(self) -> int:
        return sum(g.floored for g in self.groups)

    def per_scale(self) -> dict[int, dict]:
        out: dict[int, dict] = {}
        for g in self.groups:
            s = out.setdefault(g.scale, {"ideal_bits": 0.0, "model_bits": 0.0, "pixels": 0})
            s["ideal_bits"] += g.ideal_bits
            s["model_bits"] += g.model_bits
            s["pixels"] += g.pixels
        return out


class _EncodeSink:
    """Feeds ground truth to the pipeline and emits symbols."""

    def __init__(self, patch: np.ndarray, scales: int, offset):
        self.chain = grp.decompose(patch, scales, offset)
        self.enc = RangeEncoder()
        self.raw = b""

    def raw_scale(self) -> np.ndarray:
        deepest = self.chain[-1]
        self.raw = deepest.tobytes()  # raster order, R,G,B per pixel
        return deepest

    def code_group(self, scale: int, coords: np.ndarray, freq: np.ndarray,
                   cum: np.ndarray) -> np.ndarray:
        truth = self.chain[scale - 1].reshape(-1, 3)[coords]
        enc = self.enc
        for i in range(coords.size):
            trow, frow, crow = truth[i], freq[i], cum[i]
            for ch in range(3):
                enc.encode_row(frow[ch], crow[ch], int(trow[ch]))
        return truth

    def finish(self) -> tuple[bytes, bytes]:
        return self.enc.finalize(), self.raw


class _DecodeSink:
    """Reads symbols and returns decoded values in place of ground truth."""

    def __init__(self, payload: bytes, raw: bytes, raw_dims: tuple[int, int]):
        self.dec = RangeDecoder(payload)
        h, w = raw_dims
        if len(raw) != h * w * 3:
            raise cont.ContainerFormatError(
                f"raw block holds {len(raw)} bytes, expected {h * w * 3}")
        self._raw = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)

    def raw_scale(self) -> np.ndarray:
        return self._raw

    def code_group(self, scale: int, coords: np.ndarray, freq: np.ndarray,
                   cum: np.ndarray) -> np.ndarray:
        dec = self.dec
        values = np.empty((coords.size, 3), dtype=np.uint8)
        for i in range(coords.size):
            frow, crow = freq[i], cum[i]
            for ch in range(3):
                values[i, ch] = dec.decode_row(frow[ch], crow[ch])
        return values


def _run_patch(model: ProgressiveModel, cfg: NetConfig, grouping_method: str,
               b_per_scale: tuple[int, ...], seed: int, sink,
               stats: CodeStats | None = None, trace=None,
               want_model_bits: bool = False) -> np.ndarray:
    """Drive one padded patch through every scale and group; returns the
    reconstructed patch (identical to the encoder's input by construction)."""
    m = cfg.scales
    k = cfg.mixtures
    offset = cfg.subset_offset
    descending = not cfg.dynamic_ascending

    current = sink.raw_scale()
    if stats is not None:
        stats.raw_bits += current.size * 8

    z_prev: Tensor | None = None
    for scale in range(m, 0, -1):
        h, w = current.shape[0] * 2, current.shape[1] * 2
        up, sub_mask = upsample_values(current, offset)
        state = grp.ProgressState.begin_scale(up[None], sub_mask)
        z = model.initial_context(scale, z_prev, batch=1, hw=(h, w))
        b = b_per_scale[scale - 1]
        if grouping_method == "dynamic":
            masks = None
        else:
            masks = grp.static_group_masks(grouping_method, (h, w), b=b, seed=seed,
                                           scale_index=scale, offset=offset)
            if len(masks) != b:
                raise cont.ContainerFormatError(
                    f"{grouping_method} defines {len(masks)} groups but the stream says {b}")
        avail = ~sub_mask
        for j in range(1, b + 1):
            p, z = model.forward_step(
                scale, Tensor(state.normalized()), Tensor(state.known_plane()), z)
            p_flat = p.data[0].reshape(cfg.q, h * w)
            if masks is None:
                scores = np.full(h * w, -np.inf)
                av = np.flatnonzero(avail.ravel())
                scores[av] = dmol.entropy_bound_map(p_flat[:, av], k)
                mask_j = grp.select_dynamic_group(
                    scores.reshape(h, w), b, j, avail, descending=descending)
            else:
                mask_j = masks[j - 1]
            coords = np.flatnonzero(mask_j.ravel())
            gstat = GroupStats(scale=scale, group=j, pixels=int(coords.size)) \
                if stats is not None else None
            values = np.empty((coords.size, 3), dtype=np.uint8)
            for lo in range(0, coords.size, _PMF_CHUNK):
                chunk = coords[lo:lo + _PMF_CHUNK]
                pmf, _ = dmol.pmf_tables(p_flat[:, chunk], k)
                freq = quantize_pmf(pmf).astype(np.int64)
                cum = np.zeros((chunk.size, 3, 257), dtype=np.int64)
                np.cumsum(freq, axis=-1, out=cum[..., 1:])
                got = sink.code_group(scale, chunk, freq, cum)
                values[lo:lo + chunk.size] = got
                if gstat is not None:
                    rows = np.arange(chunk.size)[:, None]
                    chs = np.arange(3)[None, :]
                    picked = got.astype(np.int64)
                    f_used = freq[rows, chs, picked]
                    gstat.ideal_bits += float(np.sum(16.0 - np.log2(f_used)))
                    if want_model_bits:
                        p_true = pmf[rows, chs, picked]
                        gstat.floored += int(np.count_nonzero(p_true < dmol.PROB_FLOOR))
                        gstat.model_bits += float(
                            np.sum(-np.log2(np.maximum(p_true, dmol.PROB_FLOOR))))
                if trace is not None:
                    trace(scale, j, chunk, freq)
            if coords.size:
                state.mixer_update(mask_j, values[None])
                avail &= ~mask_j
            else:
                state.groups_done += 1
            if gstat is not None:
                stats.groups.append(gstat)
        z_prev = z
        current = state.pixels[0]
    return current


def _resolve_coding(model: ProgressiveModel, profile: Profile | None,
                    grouping_override: str | None, patch_override: int | None,
                    groups_override: int | None):
    cfg = model.cfg
    method = grouping_override or (profile.grouping if profile else cfg.grouping)
    if method not in grp.GROUPING_IDS:
        raise ValueError(f"unknown grouping method {method!r}")
    b_default = groups_override or cfg.groups
    b = grp.group_count(method, b_default)
    patch = patch_override or (profile.patch_size if profile else 496)
    if patch < 1 or patch > 0xFFFF:
        raise ValueError(f"patch size {patch} outside [1, 65535]")
    profile_id = profile.profile_id if profile else PROFILE_IDS["custom"]
    return method, b, patch, profile_id


def encode_image(image: np.ndarray, model: ProgressiveModel, model_hash: bytes,
                 profile: Profile | None = None, grouping: str | None = None,
                 patch_size: int | None = None, groups: int | None = None,
                 seed: int = 0, threads: int = 1,
                 stats: CodeStats | None = None, trace=None,
                 want_model_bits: bool = False) -> bytes:
    """Encode an (H, W, 3) uint8 image into a self-describing byte stream."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    cfg = model.cfg
    method, b, patch, profile_id = _resolve_coding(model, profile, grouping, patch_size, groups)
    flags = (cont.FLAG_SUBSET_EVEN if cfg.subset_even else 0) | (
        cont.FLAG_DYNAMIC_ASCENDING if cfg.dynamic_ascending else 0)
    info = cont.ContainerInfo(
        width=image.shape[1], height=image.shape[0], scales=cfg.scales,
        profile_id=profile_id, grouping=method, flags=flags, patch_size=patch,
        groups_per_scale=tuple([b] * cfg.scales), seed=seed,
        model_hash=model_hash, payload_lengths=(), crcs=(),
    )

    regions = info.patch_regions()

    def encode_patch(region):
        r0, c0, th, tw = region
        tile = grp.pad_image(np.ascontiguousarray(image[r0:r0 + th, c0:c0 + tw]), cfg.scales)
        sink = _EncodeSink(tile, cfg.scales, cfg.subset_offset)
        pstats = CodeStats() if stats is not None else None
        with T.no_grad(), T.finite_checks(False):
            out = _run_patch(model, cfg, method, info.groups_per_scale, seed, sink,
                             stats=pstats, trace=trace, want_model_bits=want_model_bits)
        if not np.array_equal(out, tile):
            raise AssertionError("encoder self-check failed: pipeline did not preserve the patch")
        payload, raw = sink.finish()
        if pstats is not None:
            pstats.streams.append({
                "payload_bits": 8 * len(payload),
                "ideal_bits": sum(g.ideal_bits for g in pstats.groups),
            })
        return payload, raw, pstats

    if threads > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(encode_patch, regions))
    else:
        results = [encode_patch(r) for r in regions]

    payloads = [r[0] for r in results]
    raws = [r[1] for r in results]
    if stats is not None:
        for r in results:
            stats.merge(r[2])
    info.payload_lengths = tuple(len(p) for p in payloads)
    return cont.build(info, payloads, raws)


def decode_image(blob: bytes, model: ProgressiveModel, model_hash: bytes,
                 threads: int = 1) -> np.ndarray:
    """Exact inverse of encode_image for the matching checkpoint."""
    info, payloads, raws = cont.parse(blob)
    if info.model_hash != model_hash:
        raise ModelMismatchError(
            "stream was coded with a different model checkpoint "
            f"(hash {info.model_hash.hex()[:16]}..., ours {model_hash.hex()[:16]}...)")
    cfg = model.cfg
    if info.scales != cfg.scales:
        raise ModelMismatchError(
            f"stream uses {info.scales} scales but the checkpoint has {cfg.scales}")
    if info.subset_even != cfg.subset_even:
        raise ModelMismatchError("stream and checkpoint disagree on the subset offset")
    cont.verify_crcs(info, payloads, raws)

    regions = info.patch_regions()
    image = np.empty((info.height, info.width, 3), dtype=np.uint8)

    def decode_patch(idx_region):
        idx, (r0, c0, th, tw) = idx_region
        ph, pw = grp.padded_dims(th, tw, cfg.scales)
        unit = 1 << cfg.scales
        sink = _DecodeSink(payloads[idx], raws[idx], (ph // unit, pw // unit))
        with T.no_grad(), T.finite_checks(False):
            tile = _run_patch(model, cfg, info.grouping, info.groups_per_scale,
                              info.seed, sink)
        return idx, tile[:th, :tw]

    if threads > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(decode_patch, enumerate(regions)))
    else:
        results = [decode_patch(x) for x in enumerate(regions)]

    for idx, tile in results:
        r0, c0, th, tw = regions[idx]
        image[r0:r0 + th, c0:c0 + tw] = tile
    return image


def code_length_report(image: np.ndarray, model: ProgressiveModel, model_hash: bytes,
                       profile: Profile | None = None, grouping: str | None = None,
                       patch_size: int | None = None, groups: int | None = None,
                       seed: int = 0, threads: int = 1) -> dict:
    """Encode and account: realized size, per-scale bits, model cross-entropy.

    ``bpp`` is 8*filesize/(H*W); ``model_bpp`` is the cross-entropy the model
    assigns to the image (raw deepest scale included), which the realized size
    can only exceed by quantization loss plus the per-stream coder slack.
    """
    stats = CodeStats()
    blob = encode_image(image, model, model_hash, profile=profile, grouping=grouping,
                        patch_size=patch_size, groups=groups, seed=seed, threads=threads,
                        stats=stats, want_model_bits=True)
    h, w = image.shape[:2]
    n_pixels = h * w
    file_bits = 8 * len(blob)
    per_scale = {
        scale: {
            "ideal_bits": round(v["ideal_bits"], 3),
            "model_bits": round(v["model_bits"], 3),
            "pixels": v["pixels"],
        }
        for scale, v in sorted(stats.per_scale().items())
    }
    return {
        "width": w,
        "height": h,
        "file_bytes": len(blob),
        "bpp": file_bits / n_pixels,
        "bits_per_subpixel": file_bits / n_pixels / 3.0,
        "model_bpp": (stats.model_bits + stats.raw_bits) / n_pixels,
        "model_bits": stats.model_bits,
        "ideal_bits": stats.ideal_bits,
        "payload_bits": stats.payload_bits,
        "raw_bits": stats.raw_bits,
        "coder_overhead_bits": stats.payload_bits - stats.ideal_bits,
        "n_streams": stats.n_streams,
        "floored_probabilities": stats.floored,
        "per_scale": per_scale,
        "per_group": [
            {"scale": g.scale, "group": g.group, "pixels": g.pixels,
             "ideal_bits": round(g.ideal_bits, 3), "model_bits": round(g.model_bits, 3)}
            for g in stats.groups
        ],
    }
