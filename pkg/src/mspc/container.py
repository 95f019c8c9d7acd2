"""On-disk stream container.

Header (little-endian, byte-exact layout in docs/FORMAT.md):
magic "MSP1", version, original dims, scale count, profile id, grouping id,
flags, patch size, per-scale group counts, grouping seed, model hash, then one
(payload length, CRC-32) record per patch.  Payload bytes for all patches
follow, then the raw deepest-scale bytes for all patches.  Patches tile the
image row-major; each patch is padded on its own, so payload and raw lengths
are derivable from the geometry, and every patch decodes independently.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from math import ceil

from .grouping import GROUPING_IDS, GROUPING_NAMES, padded_dims

MAGIC = b"MSP1"
VERSION = 1

FLAG_SUBSET_EVEN = 1
FLAG_DYNAMIC_ASCENDING = 2

_FIXED = struct.Struct("<4sHIIBBBBH")


class ContainerFormatError(ValueError):
    pass


class IntegrityError(ValueError):
    """A payload no longer matches its recorded checksum."""


@dataclass
class ContainerInfo:
    width: int
    height: int
    scales: int
    profile_id: int
    grouping: str
    flags: int
    patch_size: int
    groups_per_scale: tuple[int, ...]
    seed: int
    model_hash: bytes
    payload_lengths: tuple[int, ...]
    crcs: tuple[int, ...]

    @property
    def subset_even(self) -> bool:
        return bool(self.flags & FLAG_SUBSET_EVEN)

    @property
    def dynamic_ascending(self) -> bool:
        return bool(self.flags & FLAG_DYNAMIC_ASCENDING)

    def patch_grid(self) -> tuple[int, int]:
        return (ceil(self.height / self.patch_size), ceil(self.width / self.patch_size))

    def patch_regions(self) -> list[tuple[int, int, int, int]]:
        """(row0, col0, height, width) per patch, row-major."""
        rows, cols = self.patch_grid()
        out = []
        for pr in range(rows):
            for pc in range(cols):
                r0 = pr * self.patch_size
                c0 = pc * self.patch_size
                out.append((r0, c0,
                            min(self.patch_size, self.height - r0),
                            min(self.patch_size, self.width - c0)))
        return out

    def raw_lengths(self) -> list[int]:
        unit = 1 << self.scales
        out = []
        for _r0, _c0, th, tw in self.patch_regions():
            ph, pw = padded_dims(th, tw, self.scales)
            out.append((ph // unit) * (pw // unit) * 3)
        return out

    def header_size(self) -> int:
        n = len(self.payload_lengths)
        return _FIXED.size + self.scales + 8 + 32 + 8 * n


def build(info: ContainerInfo, payloads: list[bytes], raws: list[bytes]) -> bytes:
    n_patches = len(info.patch_regions())
    if not (len(payloads) == len(raws) == n_patches):
        raise ContainerFormatError(
            f"expected {n_patches} patches, got {len(payloads)} payloads / {len(raws)} raws")
    parts = [
        _FIXED.pack(MAGIC, VERSION, info.width, info.height, info.scales,
                    info.profile_id, GROUPING_IDS[info.grouping], info.flags,
                    info.patch_size),
        bytes(info.groups_per_scale),
        struct.pack("<Q", info.seed & 0xFFFFFFFFFFFFFFFF),
        info.model_hash,
    ]
    if len(info.model_hash) != 32:
        raise ContainerFormatError("model hash must be 32 bytes")
    for payload, raw in zip(payloads, raws):
        crc = zlib.crc32(raw, zlib.crc32(payload))
        parts.append(struct.pack("<II", len(payload), crc))
    parts.extend(payloads)
    parts.extend(raws)
    return b"".join(parts)


def parse(blob: bytes) -> tuple[ContainerInfo, list[bytes], list[bytes]]:
    if blob[:4] != MAGIC:
        raise ContainerFormatError("not a coded stream (bad magic)")
    if len(blob) < _FIXED.size:
        raise ContainerFormatError("truncated header")
    (_, version, width, height, scales, profile_id, grouping_id, flags,
     patch_size) = _FIXED.unpack_from(blob)
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    if grouping_id not in GROUPING_NAMES:
        raise ContainerFormatError(f"unknown grouping id {grouping_id}")
    if patch_size < 1 or width < 1 or height < 1 or scales < 1:
        raise ContainerFormatError("corrupt header fields")
    pos = _FIXED.size
    if len(blob) < pos + scales + 8 + 32:
        raise ContainerFormatError("truncated header")
    groups = tuple(blob[pos:pos + scales])
    pos += scales
    (seed,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    model_hash = blob[pos:pos + 32]
    pos += 32

    info = ContainerInfo(
        width=width, height=height, scales=scales, profile_id=profile_id,
        grouping=GROUPING_NAMES[grouping_id], flags=flags, patch_size=patch_size,
        groups_per_scale=groups, seed=seed, model_hash=model_hash,
        payload_lengths=(), crcs=(),
    )
    n_patches = len(info.patch_regions())
    if len(blob) < pos + 8 * n_patches:
        raise ContainerFormatError("truncated patch records")
    lengths, crcs = [], []
    for _ in range(n_patches):
        ln, crc = struct.unpack_from("<II", blob, pos)
        lengths.append(ln)
        crcs.append(crc)
        pos += 8
    info.payload_lengths = tuple(lengths)
    info.crcs = tuple(crcs)

    payloads = []
    for ln in lengths:
        payloads.append(blob[pos:pos + ln])
        pos += ln
    raws = []
    for ln in info.raw_lengths():
        raws.append(blob[pos:pos + ln])
        pos += ln
    if pos > len(blob):
        raise ContainerFormatError("container shorter than its declared contents")
    if pos != len(blob):
        raise ContainerFormatError(f"{len(blob) - pos} trailing bytes after patch data")
    return info, payloads, raws


def verify_crcs(info: ContainerInfo, payloads: list[bytes], raws: list[bytes]) -> None:
    for i, (payload, raw, crc) in enumerate(zip(payloads, raws, info.crcs)):
        if zlib.crc32(raw, zlib.crc32(payload)) != crc:
            raise IntegrityError(f"patch {i}: checksum mismatch, stream is corrupt")
