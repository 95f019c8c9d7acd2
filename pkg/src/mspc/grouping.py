"""Scale decomposition, pixel grouping, and the progressive mixer state.

A scale is a nested subset of the previous scale's pixels (stride-2 grid at a
fixed offset), so decomposition is pure coordinate selection and trivially
invertible.  The remaining three quarters of each scale's pixels are split
into ordered groups by one of four methods; groups are coded one after
another, and the mixer overwrites predicted values with true (or decoded)
values as each group completes.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

GROUPING_IDS = {"random": 0, "fixed_a": 1, "fixed_b": 2, "dynamic": 3}
GROUPING_NAMES = {v: k for k, v in GROUPING_IDS.items()}

# Subset offset within each 2x2 block.  (1,1) is the default (odd rows, odd
# columns); (0,0) makes the subset equal to nearest-neighbour downsampling.
SUBSET_ODD = (1, 1)
SUBSET_EVEN = (0, 0)

# Group index per tile cell, 0 marking the subset ("already available") cell.
# Tiles are written for the (1,1) subset offset and shifted for (0,0).
_TILE_A = np.array([[1, 2],
                    [3, 0]], dtype=np.int64)          # 2x2, 3 groups
_TILE_B = np.array([[5, 3, 2, 4],
                    [6, 0, 1, 0]], dtype=np.int64)    # 2x4, 6 groups

FIXED_GROUP_COUNTS = {"fixed_a": 3, "fixed_b": 6}


def group_count(method: str, b: int | None) -> int:
    """Number of groups a method uses at one scale."""
    if method in FIXED_GROUP_COUNTS:
        return FIXED_GROUP_COUNTS[method]
    if method in ("random", "dynamic"):
        if b is None or b < 1:
            raise ValueError(f"grouping {method!r} needs an explicit group count >= 1")
        return int(b)
    raise ValueError(f"unknown grouping method {method!r}")


def padded_dims(h: int, w: int, m: int) -> tuple[int, int]:
    """Smallest dims >= (h, w) divisible by 2^m."""
    unit = 1 << m
    return (max(1, ceil(h / unit)) * unit, max(1, ceil(w / unit)) * unit)


def pad_image(img: np.ndarray, m: int) -> np.ndarray:
    """Edge-replicate an (H,W,3) image up to dims divisible by 2^m."""
    h, w = img.shape[:2]
    ph, pw = padded_dims(h, w, m)
    if (ph, pw) == (h, w):
        return img
    return np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")


def decompose(img: np.ndarray, m: int, offset: tuple[int, int] = SUBSET_ODD) -> list[np.ndarray]:
    """Nested subset chain [x0, x1, ..., xM]; x0 is the input itself.

    Each level keeps the pixels at the stride-2 grid of the previous level.
    No arithmetic is performed, so reassembling the levels with the per-scale
    group pixels reproduces the image exactly.
    """
    h, w = img.shape[:2]
    if h % (1 << m) or w % (1 << m):
        raise ValueError(f"dims {h}x{w} not divisible by 2^{m}; pad first")
    oy, ox = offset
    chain = [img]
    for _ in range(m):
        chain.append(chain[-1][oy::2, ox::2])
    return chain


def subset_mask(h: int, w: int, offset: tuple[int, int] = SUBSET_ODD) -> np.ndarray:
    """True where a pixel survives into the next scale."""
    mask = np.zeros((h, w), dtype=bool)
    mask[offset[0]::2, offset[1]::2] = True
    return mask


def _tile_lookup(tile: np.ndarray, h: int, w: int, offset: tuple[int, int]) -> np.ndarray:
    th, tw = tile.shape
    rows = (np.arange(h)[:, None] + 1 - offset[0]) % th
    cols = (np.arange(w)[None, :] + 1 - offset[1]) % tw
    return tile[rows, cols]


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; wraparound multiplies are the point
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def static_group_masks(method: str, dims: tuple[int, int], b: int | None = None,
                       seed: int = 0, scale_index: int = 1,
                       offset: tuple[int, int] = SUBSET_ODD) -> list[np.ndarray]:
    """Ordered group masks for one scale of an (H,W) grid.

    The masks are pairwise disjoint and together cover exactly the non-subset
    pixels.  ``random`` keys a counter-based generator on
    (seed, scale, coordinate), so the encoder and decoder agree by sharing
    the seed in the stream header.
    """
    h, w = dims
    if h % 2 or w % 2:
        raise ValueError(f"grid dims must be even, got {h}x{w}")
    if method == "fixed_a":
        grid = _tile_lookup(_TILE_A, h, w, offset)
        return [grid == g for g in range(1, 4)]
    if method == "fixed_b":
        grid = _tile_lookup(_TILE_B, h, w, offset)
        return [grid == g for g in range(1, 7)]
    if method == "random":
        nb = group_count(method, b)
        coord = np.arange(h * w, dtype=np.uint64).reshape(h, w)
        key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix64(
            np.uint64(scale_index))
        grid = (_mix64(coord ^ key) % np.uint64(nb)).astype(np.int64)
        grid[subset_mask(h, w, offset)] = -1
        return [grid == g for g in range(nb)]
    raise ValueError(f"unknown static grouping method {method!r}")


def select_dynamic_group(scores: np.ndarray, b: int, j: int,
                         available: np.ndarray, descending: bool = True) -> np.ndarray:
    """Pick the next group from per-pixel difficulty scores.

    Takes ceil(N_remaining / (B - j + 1)) pixels with the highest scores
    (descending mode), breaking ties by raster order.  Pure function of the
    scores, so the decoder reproduces the encoder's schedule exactly.
    """
    if not 1 <= j <= b:
        raise ValueError(f"group step j={j} outside [1, {b}]")
    available = np.asarray(available, dtype=bool)
    flat_avail = np.flatnonzero(available.ravel())
    n_remaining = flat_avail.size
    if n_remaining == 0:
        raise ValueError("no unprocessed pixels left to group")
    n_take = ceil(n_remaining / (b - j + 1))
    sc = np.asarray(scores).ravel()[flat_avail]
    if not descending:
        sc = -sc
    order = np.lexsort((flat_avail, -sc))
    chosen = flat_avail[order[:n_take]]
    mask = np.zeros(available.size, dtype=bool)
    mask[chosen] = True
    return mask.reshape(available.shape)


@dataclass
class ProgressState:
    """Mutable per-scale coding state: value plane plus the truth mask.

    ``pixels`` is (N, H, W, 3) uint8 holding a mixture of predicted and true
    values; ``known`` is (H, W) and marks positions whose values are exact
    (ground truth while encoding, decoded while decoding).  Written positions
    are never touched again.
    """

    pixels: np.ndarray
    known: np.ndarray
    groups_done: int = 0

    @classmethod
    def begin_scale(cls, upsampled: np.ndarray, known: np.ndarray) -> "ProgressState":
        pixels = upsampled if upsampled.ndim == 4 else upsampled[None]
        return cls(pixels=pixels.copy(), known=known.copy())

    def mixer_update(self, mask: np.ndarray, values: np.ndarray) -> "ProgressState":
        """Overwrite the masked positions with true values and mark them known."""
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & self.known):
            raise ValueError("group mask overlaps already-known pixels")
        if mask.any():
            vals = np.asarray(values, dtype=np.uint8)
            if vals.ndim == 2:
                vals = vals[None]
            self.pixels[:, mask, :] = vals
            self.known |= mask
        self.groups_done += 1
        return self

    def normalized(self) -> np.ndarray:
        """(N, 3, H, W) float copy in [-1, 1] for the network."""
        x = self.pixels.astype(np.float32) * (2.0 / 255.0) - 1.0
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def known_plane(self) -> np.ndarray:
        return self.known.astype(np.float32)[None, None]
