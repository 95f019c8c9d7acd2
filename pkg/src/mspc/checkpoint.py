"""Model checkpoint serialization.

Little-endian container: a fixed-size config block followed by named float32
tensors.  The byte-exact layout is documented in docs/FORMAT.md; the SHA-256
of the whole file doubles as the model identity that coded streams pin.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .grouping import GROUPING_IDS, GROUPING_NAMES
from .network import NetConfig
from .optim import ParamStore

MAGIC = b"MSPC"
VERSION = 1

_FLAG_SUBSET_EVEN = 1
_FLAG_SHARE_WEIGHTS = 2
_FLAG_DYNAMIC_ASCENDING = 4

_HEAD = struct.Struct("<4sHHHBBBBB3xQI")


class CheckpointError(ValueError):
    pass


def _config_flags(cfg: NetConfig) -> int:
    return (
        (_FLAG_SUBSET_EVEN if cfg.subset_even else 0)
        | (_FLAG_SHARE_WEIGHTS if cfg.share_weights else 0)
        | (_FLAG_DYNAMIC_ASCENDING if cfg.dynamic_ascending else 0)
    )


def serialize(cfg: NetConfig, store: ParamStore) -> bytes:
    names = sorted(store.params)
    parts = [
        _HEAD.pack(
            MAGIC, VERSION, cfg.width, cfg.mixtures, cfg.scales, cfg.resblocks,
            GROUPING_IDS[cfg.grouping], _config_flags(cfg), cfg.groups,
            cfg.seed & 0xFFFFFFFFFFFFFFFF, len(names),
        )
    ]
    for name in names:
        data = store.params[name].data.astype("<f4")
        dims = list(data.shape) + [1] * (4 - data.ndim)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *dims))
        parts.append(data.tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> tuple[NetConfig, ParamStore]:
    if len(blob) < _HEAD.size or blob[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (_, version, width, mixtures, scales, resblocks, grouping_id, flags,
     groups, seed, count) = _HEAD.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if grouping_id not in GROUPING_NAMES:
        raise CheckpointError(f"unknown grouping id {grouping_id}")
    cfg = NetConfig(
        width=width, mixtures=mixtures, scales=scales, resblocks=resblocks,
        grouping=GROUPING_NAMES[grouping_id], groups=groups,
        share_weights=bool(flags & _FLAG_SHARE_WEIGHTS),
        subset_even=bool(flags & _FLAG_SUBSET_EVEN),
        dynamic_ascending=bool(flags & _FLAG_DYNAMIC_ASCENDING),
        seed=seed,
    )
    store = ParamStore()
    pos = _HEAD.size
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dims = struct.unpack_from("<4I", blob, pos)
        pos += 16
        n = int(np.prod(dims))
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).copy()
        pos += 4 * n
        shape = (dims[0],) if name.endswith(".b") else tuple(dims)
        store.add(name, data.reshape(shape))
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after tensor data")
    return cfg, store


def save_checkpoint(path, cfg: NetConfig, store: ParamStore) -> bytes:
    """Write the checkpoint and return its SHA-256 digest."""
    blob = serialize(cfg, store)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).digest()


def load_checkpoint(path) -> tuple[NetConfig, ParamStore, bytes]:
    """Read a checkpoint; returns (config, params, sha256 digest)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"model checkpoint not found: {p}")
    blob = p.read_bytes()
    cfg, store = deserialize(blob)
    return cfg, store, hashlib.sha256(blob).digest()
