import json

import numpy as np
import pytest

from flimca import decoder, imagery


class TestRescaleChannels:
    def test_unit_range_per_channel(self):
        rng = np.random.default_rng(0)
        feats = rng.random((6, 7, 3)) * 10 - 5
        out = decoder.rescale_channels(feats)
        np.testing.assert_allclose(out.min(axis=(0, 1)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.max(axis=(0, 1)), 1.0, atol=1e-12)

    def test_constant_channel_zeroed(self):
        feats = np.zeros((4, 4, 2))
        feats[:, :, 0] = 3.0
        feats[0, 0, 1] = 1.0
        out = decoder.rescale_channels(feats)
        assert (out[:, :, 0] == 0.0).all()
        assert out[0, 0, 1] == 1.0

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        feats = rng.random((5, 5, 2))
        shifted = feats * 4.0 + 7.0
        np.testing.assert_allclose(
            decoder.rescale_channels(feats), decoder.rescale_channels(shifted), atol=1e-12
        )


class TestChannelStats:
    def test_means_and_areas_oracle(self):
        rng = np.random.default_rng(2)
        feats = rng.random((8, 8, 4))
        stats = decoder.channel_stats(feats)
        scaled = decoder.rescale_channels(feats)
        for i in range(4):
            ch = scaled[:, :, i]
            assert stats.means[i] == pytest.approx(ch.mean(), abs=1e-12)
            thr, _ = imagery.otsu_1d(ch)
            assert stats.areas[i] == pytest.approx((ch > thr).mean(), abs=1e-12)
        assert stats.variance == pytest.approx(stats.means.var(), abs=1e-12)
        t, _ = imagery.otsu_1d(stats.means)
        assert stats.global_threshold == pytest.approx(t, abs=1e-12)

    def test_zero_channels_rejected(self):
        with pytest.raises(ValueError):
            decoder.channel_stats(np.zeros((4, 4, 0)))

    def test_degenerate_means_fall_back_to_mean(self):
        feats = np.zeros((4, 4, 3))
        stats = decoder.channel_stats(feats)
        assert stats.global_threshold == pytest.approx(0.0)
        assert stats.variance == 0.0


class TestChannelWeights:
    def _stats(self, means, t, var, areas):
        return decoder.ChannelStats(np.array(means, float), t, var, np.array(areas, float))

    def test_three_way_split(self):
        params = decoder.DecoderParams(area_low=0.1, area_high=0.2)
        stats = self._stats(
            means=[0.10, 0.80, 0.50],
            t=0.5,
            var=0.02,
            areas=[0.05, 0.30, 0.15],
        )
        w = decoder.channel_weights(stats, params)
        np.testing.assert_array_equal(w, [1.0, -1.0, 0.0])

    def test_area_gate_blocks_votes(self):
        params = decoder.DecoderParams()
        # mean qualifies for foreground but area too large; mean qualifies
        # for background but area too small
        stats = self._stats([0.1, 0.9], 0.5, 0.0, [0.5, 0.05])
        w = decoder.channel_weights(stats, params)
        np.testing.assert_array_equal(w, [0.0, 0.0])

    def test_boundary_inclusive_means_exclusive_areas(self):
        params = decoder.DecoderParams(area_low=0.1, area_high=0.2)
        stats = self._stats([0.4, 0.6], 0.5, 0.1, [0.1, 0.2])
        # means hit T -+ sigma^2 exactly (inclusive) but areas hit the
        # strict bounds exactly, so both votes are withheld
        w = decoder.channel_weights(stats, params)
        np.testing.assert_array_equal(w, [0.0, 0.0])
        stats2 = self._stats([0.4, 0.6], 0.5, 0.1, [0.0999, 0.2001])
        np.testing.assert_array_equal(decoder.channel_weights(stats2, params), [1.0, -1.0])

    def test_random_tuples_against_rule_oracle(self):
        rng = np.random.default_rng(3)
        params = decoder.DecoderParams()
        for _ in range(200):
            mean = float(rng.random())
            t = float(rng.random())
            var = float(rng.random() * 0.2)
            area = float(rng.random())
            stats = self._stats([mean], t, var, [area])
            w = decoder.channel_weights(stats, params)[0]
            if mean <= t - var and area < 0.1:
                assert w == 1.0
            elif mean >= t + var and area > 0.2:
                assert w == -1.0
            else:
                assert w == 0.0

    def test_bad_params(self):
        with pytest.raises(ValueError):
            decoder.DecoderParams(area_low=0.5, area_high=0.2)


class TestDecodeLayer:
    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(4)
        feats = rng.random((6, 6, 3))
        weights = np.array([1.0, -1.0, 0.0])
        sal = decoder.decode_layer(feats, weights)
        scaled = decoder.rescale_channels(feats)
        raw = np.maximum(scaled[:, :, 0] - scaled[:, :, 1], 0.0)
        np.testing.assert_allclose(sal, raw / raw.max(), atol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(5)
        feats = rng.random((6, 6, 4))
        sal = decoder.decode_layer(feats, np.array([1.0, 1.0, -1.0, -1.0]))
        assert sal.min() >= 0.0
        assert sal.max() == pytest.approx(1.0)

    def test_all_zero_weights(self):
        feats = np.random.default_rng(6).random((4, 4, 2))
        sal = decoder.decode_layer(feats, np.zeros(2))
        assert (sal == 0.0).all()

    def test_weight_length_mismatch(self):
        with pytest.raises(ValueError):
            decoder.decode_layer(np.zeros((4, 4, 2)), np.ones(3))


class TestDecodeStack:
    def test_shapes_upsampled(self):
        rng = np.random.default_rng(7)
        stack = [rng.random((8, 8, 3)), rng.random((4, 4, 5))]
        maps = decoder.decode_stack(stack, decoder.DecoderParams(), 16, 16)
        assert [m.shape for m in maps] == [(16, 16), (16, 16)]
        for m in maps:
            assert m.min() >= 0.0 and m.max() <= 1.0 + 1e-12

    def test_empty_stack(self):
        with pytest.raises(ValueError):
            decoder.decode_stack([], decoder.DecoderParams(), 8, 8)

    def test_composes_stats_weights_and_decode(self):
        rng = np.random.default_rng(10)
        feats = rng.random((6, 6, 5))
        params = decoder.DecoderParams()
        got = decoder.decode_stack([feats], params, 12, 12)[0]
        weights = decoder.channel_weights(decoder.channel_stats(feats), params)
        want = imagery.upsample_bilinear(decoder.decode_layer(feats, weights), 12, 12)
        np.testing.assert_array_equal(got, want)

    def test_picks_out_salient_blob(self):
        # low-mean small-area blob channels become foreground votes; broad
        # bright channels become background votes; the rest stay neutral
        n = 256.0
        feats = np.zeros((16, 16, 8))
        region = np.zeros((16, 16), dtype=bool)
        region[0:6, :] = True
        region[10:16, 0:10] = True  # 156 px, avoids the blob
        for i, target_mean in enumerate([0.30, 0.33, 0.36, 0.40]):
            pedestal = (target_mean * n - 9.0) / 246.0
            ch = np.full((16, 16), pedestal)
            ch[6:9, 6:9] = 1.0  # 9 px blob
            ch[0, 0] = 0.0
            feats[:, :, i] = ch
        for i in range(4, 8):
            feats[:, :, i] = region.astype(float)
        maps = decoder.decode_stack([feats], decoder.DecoderParams(), 16, 16)
        sal = maps[0]
        assert sal[7, 7] > 0.9
        assert sal[0, 0] < 0.2


class TestSaveStack:
    def test_files_and_manifest(self, tmp_path):
        rng = np.random.default_rng(9)
        maps = [rng.random((8, 8)), rng.random((8, 8))]
        decoder.save_stack(tmp_path, "img42", maps, decoder.DecoderParams())
        assert (tmp_path / "img42_layer1.png").exists()
        assert (tmp_path / "img42_layer2.png").exists()
        manifest = json.loads((tmp_path / "img42_stack.json").read_text())
        assert manifest["layers"] == ["img42_layer1.png", "img42_layer2.png"]
        assert manifest["decoder_params"]["area_low"] == 0.1
