"""Prediction-model tests: shapes, identities, locality of influence, the
cross-scale context hand-off, and checkpoint serialization."""

import numpy as np
import pytest

from mspc import tensor as T
from mspc.checkpoint import (
    CheckpointError,
    deserialize,
    load_checkpoint,
    save_checkpoint,
    serialize,
)
from mspc.network import NetConfig, ProgressiveModel, init_weights, resblock, upsample_values
from mspc.profiles import PROFILES, get_profile
from mspc.tensor import Tensor

from test_tensor import fd_check

TINY = NetConfig(width=8, mixtures=2, scales=2, resblocks=2, seed=7)


class TestConfigAndProfiles:
    def test_profile_presets_match_published_shapes(self):
        normal, big, extra = PROFILES["normal"], PROFILES["big"], PROFILES["extra"]
        assert (normal.scales, normal.grouping, normal.width, normal.mixtures) == (3, "fixed_a", 64, 5)
        assert (big.scales, big.grouping, big.width, big.mixtures) == (3, "fixed_b", 64, 5)
        assert (extra.scales, extra.grouping, extra.width, extra.mixtures) == (4, "fixed_b", 128, 10)
        assert normal.patch_size == big.patch_size == 496
        assert extra.patch_size == 256

    def test_profiles_selectable_by_name(self):
        for name in ("normal", "big", "extra"):
            assert get_profile(name).name == name
        with pytest.raises(KeyError, match="unknown profile"):
            get_profile("huge")

    def test_q_is_ten_per_mixture(self):
        assert NetConfig(mixtures=5).q == 50
        assert NetConfig(mixtures=10).q == 100

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(width=0)
        with pytest.raises(ValueError):
            NetConfig(grouping="diagonal")

    def test_param_counts_logged(self, capsys):
        # informational: normal and big share a parameter count by design
        counts = {}
        for name in ("normal", "big"):
            cfg = PROFILES[name].net_config()
            counts[name] = ProgressiveModel(cfg).param_count()
        assert counts["normal"] == counts["big"]
        print(f"profile parameter counts: {counts}")


class TestResblock:
    def test_zero_weights_is_identity(self, rng):
        x = rng.standard_normal((2, 6, 5, 5)).astype(np.float32)
        zw = Tensor(np.zeros((6, 6, 3, 3), dtype=np.float32))
        zb = Tensor(np.zeros(6, dtype=np.float32))
        out = resblock(Tensor(x), zw, zb, zw, zb)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("shape", [(1, 4, 2, 2), (3, 2, 6, 4)])
    def test_shape_preserved(self, rng, shape):
        c = shape[1]
        x = Tensor(rng.standard_normal(shape).astype(np.float32))
        w1 = Tensor(rng.standard_normal((c, c, 3, 3)).astype(np.float32) * 0.2)
        b = Tensor(np.zeros(c, dtype=np.float32))
        assert resblock(x, w1, b, w1, b).shape == shape

    def test_channel_mismatch_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
        w = Tensor(rng.standard_normal((5, 4, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(5, dtype=np.float32))
        with pytest.raises(ValueError, match="preserve channels"):
            resblock(x, w, b, w, b)

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        w1 = rng.standard_normal((3, 3, 3, 3)) * 0.4
        b1 = rng.standard_normal(3) * 0.1
        w2 = rng.standard_normal((3, 3, 3, 3)) * 0.4
        b2 = rng.standard_normal(3) * 0.1
        fd_check(
            lambda ts: (resblock(ts[0], ts[1], ts[2], ts[3], ts[4]) * 0.5).sum(),
            [x, w1, b1, w2, b2],
        )


class TestForwardStep:
    def _inputs(self, rng, cfg, h=8, w=8, batch=1):
        xhat = Tensor(rng.uniform(-1, 1, (batch, 3, h, w)).astype(np.float32))
        mask = Tensor((rng.random((batch, 1, h, w)) > 0.5).astype(np.float32))
        z = Tensor(rng.standard_normal((batch, cfg.width, h, w)).astype(np.float32))
        return xhat, mask, z

    def test_output_shapes(self, rng):
        model = ProgressiveModel(TINY)
        xhat, mask, z = self._inputs(rng, TINY, h=6, w=10)
        p, z2 = model.forward_step(1, xhat, mask, z)
        assert p.shape == (1, TINY.q, 6, 10)
        assert z2.shape == (1, TINY.width, 6, 10)

    def test_zero_weights_give_constant_bias_maps(self, rng):
        model = ProgressiveModel(TINY)
        for name, t in model.store.params.items():
            t.data = np.zeros_like(t.data)
        model.store.params["scale1.head_p.b"].data = np.arange(TINY.q, dtype=np.float32)
        xhat, mask, z = self._inputs(rng, TINY)
        p, z2 = model.forward_step(1, xhat, mask, z)
        expected = np.broadcast_to(np.arange(TINY.q, dtype=np.float32)[None, :, None, None], p.shape)
        np.testing.assert_array_equal(p.data, expected)
        np.testing.assert_array_equal(z2.data, np.zeros_like(z2.data))

    def test_shape_mismatch_errors(self, rng):
        model = ProgressiveModel(TINY)
        xhat, mask, z = self._inputs(rng, TINY)
        bad_z = Tensor(np.zeros((1, TINY.width, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="spatial dims"):
            model.forward_step(1, xhat, mask, bad_z)
        with pytest.raises(ValueError, match="channels"):
            model.forward_step(1, z, mask, z)

    def test_deterministic_forward(self, rng):
        model = ProgressiveModel(TINY)
        xhat, mask, z = self._inputs(rng, TINY)
        p1, z1 = model.forward_step(2, xhat, mask, z)
        p2, z2 = model.forward_step(2, xhat, mask, z)
        assert np.array_equal(p1.data, p2.data)
        assert np.array_equal(z1.data, z2.data)

    def test_influence_limited_to_receptive_field(self, rng):
        cfg = NetConfig(width=6, mixtures=1, scales=1, resblocks=2, seed=3)
        model = ProgressiveModel(cfg)
        h = w = 24
        xhat, mask, z = self._inputs(rng, cfg, h, w)
        p0, _ = model.forward_step(1, xhat, mask, z)
        bumped = xhat.data.copy()
        bumped[0, :, 12, 12] += 0.5
        p1, _ = model.forward_step(1, Tensor(bumped), mask, z)
        changed = np.argwhere(np.any(p0.data[0] != p1.data[0], axis=0))
        assert changed.size > 0
        radius = np.abs(changed - 12).max()
        assert radius <= model.receptive_radius() + 1
        far = np.abs(np.arange(h)[:, None] - 12) + 0 * np.arange(w)[None, :]
        cheb = np.maximum(np.abs(np.arange(h)[:, None] - 12), np.abs(np.arange(w)[None, :] - 12))
        outside = cheb > model.receptive_radius() + 1
        assert np.array_equal(p0.data[0][:, outside], p1.data[0][:, outside])


class TestContextHandOff:
    def test_deepest_scale_starts_from_zeros(self):
        model = ProgressiveModel(TINY)
        z = model.initial_context(TINY.scales, None, batch=2, hw=(6, 6))
        assert z.shape == (2, TINY.width, 6, 6)
        assert not z.data.any()

    def test_constant_map_stays_constant(self, rng):
        model = ProgressiveModel(TINY)
        z = Tensor(np.full((1, TINY.width, 3, 5), 0.7, dtype=np.float32))
        out = model.initial_context(1, z)
        assert out.shape == (1, TINY.width, 6, 10)
        flat = out.data.reshape(TINY.width, -1)
        # spatially constant up to float32 GEMM blocking noise
        np.testing.assert_allclose(flat, np.broadcast_to(flat[:, :1], flat.shape), atol=1e-6)

    def test_dims_double(self, rng):
        model = ProgressiveModel(TINY)
        z = Tensor(rng.standard_normal((1, TINY.width, 4, 7)).astype(np.float32))
        assert model.initial_context(1, z).shape[2:] == (8, 14)

    def test_missing_context_is_an_error(self):
        model = ProgressiveModel(TINY)
        with pytest.raises(ValueError, match="context"):
            model.initial_context(1, None)


class TestUpsampleValues:
    def test_blocks_and_mask(self, rng):
        sub = rng.integers(0, 256, (2, 2, 3), dtype=np.uint8)
        up, mask = upsample_values(sub)
        assert up.shape == (4, 4, 3)
        for r in range(2):
            for c in range(2):
                block = up[2 * r:2 * r + 2, 2 * c:2 * c + 2]
                assert np.all(block == sub[r, c])
        assert mask.sum() == 4
        assert mask[1, 1] and mask[1, 3] and mask[3, 1] and mask[3, 3]

    def test_round_trip_at_subset_coords(self, rng):
        sub = rng.integers(0, 256, (3, 5, 3), dtype=np.uint8)
        up, mask = upsample_values(sub)
        np.testing.assert_array_equal(up[1::2, 1::2], sub)
        assert mask.sum() == sub.shape[0] * sub.shape[1]


class TestWeightInit:
    def test_bounds_and_zero_biases(self):
        store = init_weights(TINY)
        for name, t in store.params.items():
            if name.endswith(".b"):
                assert not t.data.any()
            else:
                o, i, k, _ = t.shape
                bound = np.sqrt(1.0 / (i * k * k))
                assert np.abs(t.data).max() <= bound

    def test_seeded_init_reproducible(self):
        a = init_weights(TINY)
        b = init_weights(TINY)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_shared_weights_single_copy(self):
        cfg = NetConfig(width=8, mixtures=2, scales=3, resblocks=1, share_weights=True)
        store = init_weights(cfg)
        assert all(n.startswith("shared.") for n in store.params)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        cfg = NetConfig(width=8, mixtures=2, scales=2, resblocks=1,
                        grouping="random", groups=4, seed=99)
        store = init_weights(cfg)
        path = tmp_path / "model.mspc"
        digest = save_checkpoint(path, cfg, store)
        cfg2, store2, digest2 = load_checkpoint(path)
        assert digest == digest2
        assert cfg2 == cfg
        assert sorted(store2.params) == sorted(store.params)
        for name in store.params:
            np.testing.assert_array_equal(store2.params[name].data, store.params[name].data)

    def test_hash_tracks_content(self, tmp_path):
        cfg = NetConfig(width=8, mixtures=2, scales=2, resblocks=1)
        store = init_weights(cfg)
        d1 = save_checkpoint(tmp_path / "a.mspc", cfg, store)
        first = sorted(store.params)[0]
        store.params[first].data = store.params[first].data + 1.0
        d2 = save_checkpoint(tmp_path / "b.mspc", cfg, store)
        assert d1 != d2

    def test_bad_magic_rejected(self):
        with pytest.raises(CheckpointError, match="magic"):
            deserialize(b"JUNK" + b"\x00" * 64)

    def test_trailing_garbage_rejected(self):
        cfg = NetConfig(width=4, mixtures=1, scales=1, resblocks=1)
        blob = serialize(cfg, init_weights(cfg)) + b"\x00"
        with pytest.raises(CheckpointError, match="trailing"):
            deserialize(blob)

    def test_missing_file_named_in_error(self, tmp_path):
        missing = tmp_path / "nope.mspc"
        with pytest.raises(FileNotFoundError, match="nope.mspc"):
            load_checkpoint(missing)
