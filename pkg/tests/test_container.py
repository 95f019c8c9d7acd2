"""Container format tests: header round trip, geometry, checksums."""

import numpy as np
import pytest

from mspc import container as C


def make_info(**kw):
    fields = dict(
        width=130, height=70, scales=3, profile_id=0, grouping="fixed_a",
        flags=0, patch_size=64, groups_per_scale=(3, 3, 3), seed=42,
        model_hash=bytes(range(32)), payload_lengths=(), crcs=(),
    )
    fields.update(kw)
    return C.ContainerInfo(**fields)


class TestGeometry:
    def test_patch_grid_and_regions(self):
        info = make_info()
        assert info.patch_grid() == (2, 3)
        regions = info.patch_regions()
        assert len(regions) == 6
        assert regions[0] == (0, 0, 64, 64)
        assert regions[2] == (0, 128, 64, 2)    # ragged right edge
        assert regions[5] == (64, 128, 6, 2)    # ragged corner

    def test_raw_lengths_follow_padding(self):
        info = make_info(width=10, height=10, patch_size=64, scales=3)
        # 10x10 pads to 16x16; deepest scale is 2x2 pixels of 3 bytes
        assert info.raw_lengths() == [12]


class TestRoundTrip:
    def test_build_parse_identity(self, rng):
        info = make_info()
        payloads = [rng.integers(0, 256, rng.integers(1, 50)).astype(np.uint8).tobytes()
                    for _ in range(6)]
        raws = [rng.integers(0, 256, n).astype(np.uint8).tobytes()
                for n in info.raw_lengths()]
        blob = C.build(info, payloads, raws)
        info2, payloads2, raws2 = C.parse(blob)
        assert payloads2 == payloads
        assert raws2 == raws
        assert info2.width == info.width and info2.height == info.height
        assert info2.grouping == info.grouping
        assert info2.groups_per_scale == info.groups_per_scale
        assert info2.seed == info.seed
        assert info2.model_hash == info.model_hash
        C.verify_crcs(info2, payloads2, raws2)

    def test_crc_catches_payload_flip(self, rng):
        info = make_info(width=8, height=8, patch_size=64)
        payloads = [b"hello world stream"]
        raws = [bytes(info.raw_lengths()[0])]
        blob = bytearray(C.build(info, payloads, raws))
        blob[-len(raws[0]) - 5] ^= 0x40
        info2, p2, r2 = C.parse(bytes(blob))
        with pytest.raises(C.IntegrityError, match="checksum"):
            C.verify_crcs(info2, p2, r2)

    def test_crc_catches_raw_flip(self):
        info = make_info(width=8, height=8, patch_size=64)
        payloads = [b"payload"]
        raws = [bytes(info.raw_lengths()[0])]
        blob = bytearray(C.build(info, payloads, raws))
        blob[-1] ^= 0x01
        info2, p2, r2 = C.parse(bytes(blob))
        with pytest.raises(C.IntegrityError):
            C.verify_crcs(info2, p2, r2)


class TestParseErrors:
    def test_bad_magic(self):
        with pytest.raises(C.ContainerFormatError, match="magic"):
            C.parse(b"NOPE" + bytes(100))

    def test_truncated_header(self):
        info = make_info(width=8, height=8, patch_size=64)
        blob = C.build(info, [b"x"], [bytes(info.raw_lengths()[0])])
        with pytest.raises(C.ContainerFormatError, match="truncated|shorter"):
            C.parse(blob[:10])

    def test_trailing_garbage(self):
        info = make_info(width=8, height=8, patch_size=64)
        blob = C.build(info, [b"x"], [bytes(info.raw_lengths()[0])])
        with pytest.raises(C.ContainerFormatError, match="trailing"):
            C.parse(blob + b"\x00")

    def test_wrong_patch_counts_rejected(self):
        info = make_info()
        with pytest.raises(C.ContainerFormatError, match="expected 6 patches"):
            C.build(info, [b"x"], [b"y"])
