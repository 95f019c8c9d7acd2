"""Bit-exact range coder over 16-bit integer frequency tables.

The coder keeps 64-bit ``low``/``range`` state and renormalizes a byte at a
time in the carry-less style: a byte is emitted only once the top byte of the
interval is settled, and when the range gets dangerously small it is truncated
up to the next 2^48 boundary instead of letting a carry propagate.  With a
2^16 frequency total the per-symbol precision loss of the 64-bit state is
below 2^-30 bits, so realized stream length tracks the quantized ideal
-sum(log2 freq/65536) to within the small finalize tail.
"""

from __future__ import annotations

import math

import numpy as np

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS             # every table sums to exactly this
_TOP = 1 << 56                      # top byte settled below this
_BOT = 1 << 48                      # truncate rather than underflow below this
_MASK64 = (1 << 64) - 1


class CorruptStreamError(ValueError):
    """The byte stream cannot be a valid coder output for the given tables."""


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to 65536, one per 8-bit symbol.

    Every bin gets a floor of 1 so no symbol is ever unencodable; the
    remaining 65280 slots are apportioned by largest remainder, remainder
    ties broken toward the smaller symbol index.  Accepts a single
    (256,) pmf or a batch (..., 256); deterministic.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if p.shape[-1] != 256:
        raise ValueError(f"pmf must have 256 bins, got {p.shape}")
    if np.any(p < 0):
        raise ValueError("pmf contains negative probabilities")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("pmf does not sum to 1 within 1e-6")
    p = p / sums[..., None]
    ideal = p * float(TOTAL - 256)
    base = np.floor(ideal).astype(np.int64)
    rem = ideal - base
    short = (TOTAL - 256) - base.sum(axis=-1)
    # rank bins by remainder (desc); the stable sort keeps equal remainders
    # in index order, and the first `short` ranked bins get one extra slot
    order = np.argsort(-rem, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(256), rem.shape).copy(), axis=-1)
    freq = 1 + base + (rank < short[..., None])
    return freq.astype(np.uint32)


class FreqTable:
    """A quantized coding distribution: 256 frequencies plus cumulative sums."""

    __slots__ = ("freq", "cum")

    def __init__(self, freq: np.ndarray):
        freq = np.asarray(freq, dtype=np.int64)
        if freq.shape != (256,):
            raise ValueError(f"need 256 frequencies, got shape {freq.shape}")
        if freq.min() < 1:
            raise ValueError("all frequencies must be >= 1")
        cum = np.zeros(257, dtype=np.int64)
        np.cumsum(freq, out=cum[1:])
        if cum[256] != TOTAL:
            raise ValueError(f"frequencies sum to {cum[256]}, expected {TOTAL}")
        self.freq = freq
        self.cum = cum

    @classmethod
    def from_pmf(cls, pmf: np.ndarray) -> "FreqTable":
        return cls(quantize_pmf(pmf))

    @classmethod
    def uniform(cls) -> "FreqTable":
        return cls(np.full(256, TOTAL // 256, dtype=np.int64))

    def tobytes(self) -> bytes:
        return self.freq.astype("<u4").tobytes()


class RangeEncoder:
    """Sequential symbol encoder; one instance per independent stream."""

    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self.out = bytearray()
        self.symbol_count = 0
        self.ideal_bits = 0.0       # -sum(log2 freq/65536), the quantized ideal
        self._finalized = False

    def _normalize(self):
        low, rng = self.low, self.range
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            self.out.append((low >> 56) & 0xFF)
            low = (low << 8) & _MASK64
            rng <<= 8
        self.low, self.range = low, rng

    def encode(self, cum_freq: int, freq: int):
        r = self.range >> TOTAL_BITS
        self.low = (self.low + r * cum_freq) & _MASK64
        self.range = r * freq
        self._normalize()

    def encode_symbol(self, table: FreqTable, v: int):
        if self._finalized:
            raise RuntimeError("stream already finalized")
        if not 0 <= v <= 255:
            raise ValueError(f"symbol {v} outside [0, 255]")
        freq = int(table.freq[v])
        self.encode(int(table.cum[v]), freq)
        self.symbol_count += 1
        self.ideal_bits += TOTAL_BITS - math.log2(freq)

    def encode_row(self, freq_row, cum_row, v: int):
        """encode_symbol against raw (256,) frequency / (257,) cumulative rows."""
        self.encode(int(cum_row[v]), int(freq_row[v]))
        self.symbol_count += 1

    def finalize(self) -> bytes:
        """Close the stream; emits at most 8 tail bytes.

        Flushes the shortest byte prefix that pins a value inside
        [low, low + range); the decoder zero-pads reads past the end, so
        the value's unsent low bits are implied.
        """
        if self._finalized:
            raise RuntimeError("stream already finalized")
        self._finalized = True
        top = self.low + self.range
        for k in range(1, 9):
            g = 1 << (64 - 8 * k)
            v = ((self.low + g - 1) >> (64 - 8 * k)) << (64 - 8 * k)
            if self.low <= v < top:
                self.out += v.to_bytes(8, "big")[:k]
                return bytes(self.out)
        raise AssertionError("unreachable: range is always at least 2^48")


class RangeDecoder:
    """Mirror of the encoder; consumes the same tables in the same order."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK64
        self.code = 0
        self.symbol_count = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        elif self.pos < len(self.data) + 8:
            b = 0               # implied zero bits of the finalize value
        else:
            raise CorruptStreamError("stream truncated: decoder ran past the end")
        self.pos += 1
        return b

    def _normalize(self):
        low, rng, code = self.low, self.range, self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) & _MASK64) | self._read_byte()
            low = (low << 8) & _MASK64
            rng <<= 8
        self.low, self.range, self.code = low, rng, code

    def decode_row(self, freq_row, cum_row) -> int:
        """decode_symbol against raw (256,) frequency / (257,) cumulative rows."""
        r = self.range >> TOTAL_BITS
        delta = self.code - self.low
        if delta < 0:
            raise CorruptStreamError("decoder state desynchronized (code below low)")
        cum_val = delta // r
        if cum_val >= TOTAL:
            raise CorruptStreamError("cumulative value out of range; corrupt stream")
        v = int(np.searchsorted(cum_row, cum_val, side="right")) - 1
        self.low = (self.low + r * int(cum_row[v])) & _MASK64
        self.range = r * int(freq_row[v])
        self._normalize()
        self.symbol_count += 1
        return v

    def decode_symbol(self, table: FreqTable) -> int:
        return self.decode_row(table.freq, table.cum)
