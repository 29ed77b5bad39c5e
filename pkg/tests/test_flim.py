import itertools

import numpy as np
import pytest

from flimca import flim
from flimca.kmeans import kmeans


def exhaustive_kmeans_cost(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return d2.min(axis=1).sum()


def best_partition_centers(points, k):
    """Exhaustive optimal k-means over <= 12 points: try every assignment."""
    n = len(points)
    best, best_cost = None, np.inf
    for assign in itertools.product(range(k), repeat=n):
        if len(set(assign)) < k:
            continue
        centers = np.array([points[np.array(assign) == j].mean(axis=0) for j in range(k)])
        cost = exhaustive_kmeans_cost(points, centers)
        if cost < best_cost:
            best, best_cost = centers, cost
    return best


class TestKMeans:
    def test_two_separated_clusters(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0.0, 0.01, (6, 2))
        b = rng.normal(10.0, 0.01, (6, 2)) + [0, 5]
        points = np.vstack([a, b])
        centers = kmeans(points, 2, seed=1)
        opt = best_partition_centers(points, 2)
        got = centers[np.argsort(centers[:, 0])]
        want = opt[np.argsort(opt[:, 0])]
        np.testing.assert_allclose(got, want, atol=1e-3)

    def test_reproducible(self):
        rng = np.random.default_rng(2)
        pts = rng.random((50, 4))
        c1 = kmeans(pts, 5, seed=42)
        c2 = kmeans(pts, 5, seed=42)
        np.testing.assert_array_equal(c1, c2)

    def test_k_geq_n_returns_points(self):
        pts = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(kmeans(pts, 3, seed=0), pts)
        np.testing.assert_array_equal(kmeans(pts, 5, seed=0), pts)


class TestMarkers:
    def test_parse_roundtrip(self):
        text = "# comment\nimg1 10 20 3 fg\n\nimg2 5 5 0 bg  # trailing\n"
        markers = flim.parse_markers(text)
        assert markers == [
            flim.Marker("img1", 10, 20, 3, "fg"),
            flim.Marker("img2", 5, 5, 0, "bg"),
        ]
        again = flim.parse_markers(flim.format_markers(markers))
        assert again == markers

    def test_bad_label(self):
        with pytest.raises(ValueError):
            flim.parse_markers("img 0 0 1 object")

    def test_bad_field_count(self):
        with pytest.raises(ValueError):
            flim.parse_markers("img 0 0 1")


class TestCollectPatches:
    def test_radius_zero_single_patch(self):
        images = {"a": np.random.default_rng(0).random((5, 5))}
        patches = flim.collect_marker_patches(images, [flim.Marker("a", 2, 2, 0, "fg")], 3)
        assert len(patches) == 1

    def test_radius_one_gives_five(self):
        images = {"a": np.zeros((7, 7))}
        patches = flim.collect_marker_patches(images, [flim.Marker("a", 3, 3, 1, "fg")], 3)
        assert len(patches) == 5

    def test_empty_markers(self):
        assert flim.collect_marker_patches({"a": np.zeros((3, 3))}, [], 3) == []

    def test_marker_outside_image(self):
        with pytest.raises(ValueError):
            flim.collect_marker_patches({"a": np.zeros((3, 3))}, [flim.Marker("a", 5, 0, 0, "fg")], 3)


class TestNormalization:
    def test_two_point(self):
        stats = flim.fit_normalization([np.array([0.0]), np.array([2.0])])
        assert stats.mean[0] == 1.0
        assert stats.stdev[0] == 1.0

    def test_degenerate_uses_epsilon(self):
        stats = flim.fit_normalization([np.array([3.0])] * 4, epsilon=1e-3)
        assert stats.stdev[0] == 0.0
        out = stats.apply(np.array([[3.001]]))
        assert out[0, 0] == pytest.approx(1.0)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        patches = [rng.random(12) for _ in range(100)]
        stats = flim.fit_normalization(patches)
        mat = np.array(patches)
        mean = sum(patches) / len(patches)
        var = sum((p - mean) ** 2 for p in patches) / len(patches)
        np.testing.assert_allclose(stats.mean, mean, atol=1e-10)
        np.testing.assert_allclose(stats.stdev, np.sqrt(var), atol=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            flim.fit_normalization([])

    def test_normalized_training_patches_centered(self):
        rng = np.random.default_rng(7)
        patches = [rng.random(9) * 5 for _ in range(60)]
        stats = flim.fit_normalization(patches)
        normed = stats.apply(np.array(patches))
        assert np.abs(normed.mean(axis=0)).max() < 1e-8
        assert np.abs(normed.std(axis=0) - 1.0).max() < 1e-8


def _stats(dim):
    return flim.NormalizationStats(np.zeros(dim), np.ones(dim), 1e-8)


class TestLearnFilters:
    def test_single_patch_single_kernel(self):
        patch = np.array([1.0, 2.0, 2.0])
        marker = flim.Marker("a", 0, 0, 0, "fg")
        bank = flim.learn_filters([(marker, [patch])], _stats(3), 1, seed=0, side=1, in_channels=3)
        np.testing.assert_allclose(bank.kernels[0], patch / 3.0)

    def test_k_equals_distinct_patches(self):
        patches = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        marker = flim.Marker("a", 0, 0, 0, "fg")
        bank = flim.learn_filters([(marker, patches)], _stats(2), 2, seed=0, side=1, in_channels=2)
        assert len(bank) == 2
        got = sorted(bank.kernels.tolist())
        assert got == [[0.0, 1.0], [1.0, 0.0]]

    def test_two_separated_clusters(self):
        rng = np.random.default_rng(3)
        a = rng.normal([0, 5], 0.01, (6, 2))
        b = rng.normal([5, 0], 0.01, (6, 2))
        patches = [p for p in np.vstack([a, b])]
        marker = flim.Marker("a", 0, 0, 0, "fg")
        bank = flim.learn_filters([(marker, patches)], _stats(2), 2, seed=0, side=1, in_channels=2)
        opt = best_partition_centers(np.array(patches), 2)
        opt_unit = opt / np.linalg.norm(opt, axis=1, keepdims=True)
        got = bank.kernels[np.argsort(bank.kernels[:, 0])]
        want = opt_unit[np.argsort(opt_unit[:, 0])]
        np.testing.assert_allclose(got, want, atol=1e-3)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(4)
        groups = [
            (flim.Marker("a", 0, 0, 0, "fg"), [rng.random(9) for _ in range(15)]),
            (flim.Marker("a", 1, 1, 0, "bg"), [rng.random(9) for _ in range(15)]),
        ]
        bank = flim.learn_filters(groups, _stats(9), 4, seed=0, side=3, in_channels=1)
        norms = np.linalg.norm(bank.kernels, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_reproducible(self):
        rng = np.random.default_rng(5)
        groups = [(flim.Marker("a", 0, 0, 0, "fg"), [rng.random(4) for _ in range(20)])]
        b1 = flim.learn_filters(groups, _stats(4), 3, seed=9, side=1, in_channels=4)
        b2 = flim.learn_filters(groups, _stats(4), 3, seed=9, side=1, in_channels=4)
        np.testing.assert_array_equal(b1.kernels, b2.kernels)


class TestReduceFilters:
    def _bank(self, kernels):
        kernels = np.asarray(kernels, dtype=np.float64)
        return flim.FilterBank(1, kernels.shape[1], kernels, _stats(kernels.shape[1]))

    def test_under_target_unchanged(self):
        bank = self._bank(np.eye(4))
        assert flim.reduce_filters(bank, 200, seed=0) is bank

    def test_identical_kernels_collapse(self):
        k = np.array([0.6, 0.8])
        bank = self._bank([k, k, k, k])
        out = flim.reduce_filters(bank, 1, seed=0)
        assert len(out) == 1
        np.testing.assert_allclose(out.kernels[0], k)

    def test_two_groups(self):
        rng = np.random.default_rng(6)
        a = rng.normal([1, 0], 1e-4, (4, 2))
        b = rng.normal([0, 1], 1e-4, (4, 2))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        bank = self._bank(np.vstack([a, b]))
        out = flim.reduce_filters(bank, 2, seed=0)
        got = out.kernels[np.argsort(out.kernels[:, 0])]
        np.testing.assert_allclose(got[1], a.mean(axis=0) / np.linalg.norm(a.mean(axis=0)), atol=1e-3)
        np.testing.assert_allclose(got[0], b.mean(axis=0) / np.linalg.norm(b.mean(axis=0)), atol=1e-3)


def naive_forward_layer(img, spec, bank):
    """Independent per-pixel sliding-window implementation."""
    from flimca import imagery

    img = imagery.as_channels(img)
    h, w, _ = img.shape
    feat = np.zeros((h, w, len(bank)))
    for y in range(h):
        for x in range(w):
            patch = imagery.extract_patch(img, y, x, bank.side)
            z = bank.stats.apply(patch[None, :])[0]
            feat[y, x] = bank.kernels @ z
    if spec.activation == "relu":
        feat = np.maximum(feat, 0)
    if spec.pool == "none":
        return feat[::spec.pool_stride, ::spec.pool_stride]
    r = spec.pool_side // 2
    oh = -(-h // spec.pool_stride)
    ow = -(-w // spec.pool_stride)
    out = np.zeros((oh, ow, len(bank)))
    for oy in range(oh):
        for ox in range(ow):
            cy, cx = oy * spec.pool_stride, ox * spec.pool_stride
            acc = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y, x = cy + dy, cx + dx
                    if 0 <= y < h and 0 <= x < w:
                        acc.append(feat[y, x])
                    else:
                        acc.append(np.zeros(len(bank)))
            acc = np.array(acc)
            out[oy, ox] = acc.max(axis=0) if spec.pool == "max" else acc.sum(axis=0) / len(acc)
    return out


class TestForwardLayer:
    def test_impulse_kernel_identity(self):
        rng = np.random.default_rng(8)
        img = rng.random((6, 6))
        kernel = np.zeros(9)
        kernel[4] = 1.0
        bank = flim.FilterBank(3, 1, kernel[None, :], _stats(9))
        spec = flim.LayerSpec(kernel_side=3, activation="none", pool="none", pool_stride=1)
        out = flim.forward_layer(img, spec, bank)
        np.testing.assert_allclose(out[:, :, 0], img, atol=1e-12)

    def test_relu_non_negative(self):
        rng = np.random.default_rng(9)
        img = rng.random((8, 8, 2))
        kernels = rng.normal(size=(5, 18))
        kernels /= np.linalg.norm(kernels, axis=1, keepdims=True)
        stats = flim.NormalizationStats(rng.random(18), rng.random(18) + 0.5, 1e-8)
        bank = flim.FilterBank(3, 2, kernels, stats)
        spec = flim.LayerSpec(activation="relu", pool="max", pool_side=3, pool_stride=2)
        out = flim.forward_layer(img, spec, bank)
        assert (out >= 0).all()

    def test_avg_pool_4x4_stride2(self):
        rng = np.random.default_rng(10)
        img = rng.random((4, 4))
        kernel = np.zeros(9)
        kernel[4] = 1.0
        bank = flim.FilterBank(3, 1, kernel[None, :], _stats(9))
        spec = flim.LayerSpec(activation="none", pool="avg", pool_side=3, pool_stride=2)
        out = flim.forward_layer(img, spec, bank)
        assert out.shape == (2, 2, 1)
        oracle = naive_forward_layer(img, spec, bank)
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        img = rng.random((7, 6, m))
        n = int(rng.integers(1, 5))
        dim = 9 * m
        kernels = rng.normal(size=(n, dim))
        kernels /= np.linalg.norm(kernels, axis=1, keepdims=True)
        stats = flim.NormalizationStats(rng.random(dim), rng.random(dim) + 0.1, 1e-8)
        bank = flim.FilterBank(3, m, kernels, stats)
        spec = flim.LayerSpec(
            activation=rng.choice(["relu", "none"]),
            pool=rng.choice(["max", "avg", "none"]),
            pool_side=3,
            pool_stride=int(rng.integers(1, 3)),
        )
        out = flim.forward_layer(img, spec, bank)
        oracle = naive_forward_layer(img, spec, bank)
        np.testing.assert_allclose(out, oracle, atol=1e-10)

    def test_channel_mismatch(self):
        bank = flim.FilterBank(3, 2, np.ones((1, 18)) / np.sqrt(18), _stats(18))
        with pytest.raises(ValueError):
            flim.forward_layer(np.zeros((4, 4)), flim.LayerSpec(), bank)


class TestForwardEncoder:
    def _model(self, specs, seed=0):
        rng = np.random.default_rng(seed)
        model = flim.EncoderModel(input_channels=3)
        in_ch = 3
        for spec in specs:
            n = 4
            dim = spec.kernel_side**2 * in_ch
            kernels = rng.normal(size=(n, dim))
            kernels /= np.linalg.norm(kernels, axis=1, keepdims=True)
            stats = flim.NormalizationStats(np.zeros(dim), np.ones(dim), 1e-8)
            model.layers.append((spec, flim.FilterBank(spec.kernel_side, in_ch, kernels, stats)))
            in_ch = n
        return model

    def test_single_layer_composition(self):
        spec = flim.LayerSpec(pool="avg", pool_side=3, pool_stride=2)
        model = self._model([spec])
        rng = np.random.default_rng(11)
        img = rng.random((8, 8, 3))
        outs = flim.forward_encoder(img, model)
        assert len(outs) == 1
        np.testing.assert_array_equal(outs[0], flim.forward_layer(img, spec, model.layers[0][1]))

    def test_parasite_table_spatial_sizes(self):
        # 3x3 conv, ReLU, avg pool 3x3 with strides 2, 2, 1, 1
        specs = [
            flim.LayerSpec(pool="avg", pool_side=3, pool_stride=2),
            flim.LayerSpec(pool="avg", pool_side=3, pool_stride=2),
            flim.LayerSpec(pool="avg", pool_side=3, pool_stride=1),
            flim.LayerSpec(pool="avg", pool_side=3, pool_stride=1),
        ]
        model = self._model(specs)
        img = np.random.default_rng(12).random((64, 64, 3))
        outs = flim.forward_encoder(img, model)
        assert [o.shape[0] for o in outs] == [32, 16, 16, 16]

    def test_deterministic(self):
        specs = [flim.LayerSpec(pool="max", pool_side=3, pool_stride=2)]
        model = self._model(specs)
        img = np.random.default_rng(13).random((10, 10, 3))
        a = flim.forward_encoder(img, model)
        b = flim.forward_encoder(img, model)
        np.testing.assert_array_equal(a[0], b[0])


class TestProjectMarkers:
    def test_stride_one_identity(self):
        ms = [flim.Marker("a", 10, 11, 4, "fg")]
        assert flim.project_markers(ms, 1) == ms

    def test_exact_division(self):
        out = flim.project_markers([flim.Marker("a", 10, 10, 4, "fg")], 2)
        assert out == [flim.Marker("a", 5, 5, 2, "fg")]

    def test_floor_arithmetic(self):
        out = flim.project_markers([flim.Marker("a", 11, 10, 1, "bg")], 4)
        assert out == [flim.Marker("a", 2, 2, 0, "bg")]

    def test_duplicate_merge(self):
        ms = [flim.Marker("a", 8, 8, 1, "fg"), flim.Marker("a", 9, 9, 1, "fg")]
        out = flim.project_markers(ms, 4)
        assert len(out) == 1


class TestTrainEncoder:
    def test_filters_per_marker_counting(self):
        rng = np.random.default_rng(14)
        img = rng.random((32, 32, 3))
        markers = [flim.Marker("a", 4 + 5 * i, 4 + 5 * i, 1, "fg" if i % 2 else "bg") for i in range(5)]
        specs = [flim.LayerSpec(filters_per_marker=4, pool="avg", pool_side=3, pool_stride=2)]
        model = flim.train_encoder({"a": img}, markers, specs, 3, seed=0)
        assert len(model.layers[0][1]) == 20

    def test_zero_markers_error(self):
        with pytest.raises(ValueError):
            flim.train_encoder({"a": np.zeros((8, 8, 3))}, [], [flim.LayerSpec()], 3)

    def test_reproducible(self):
        rng = np.random.default_rng(15)
        img = rng.random((24, 24, 3))
        markers = [flim.Marker("a", 8, 8, 2, "fg"), flim.Marker("a", 18, 18, 2, "bg")]
        specs = [flim.LayerSpec(pool="max", pool_side=3, pool_stride=2), flim.LayerSpec()]
        m1 = flim.train_encoder({"a": img}, markers, specs, 3, seed=7)
        m2 = flim.train_encoder({"a": img}, markers, specs, 3, seed=7)
        for (s1, b1), (s2, b2) in zip(m1.layers, m2.layers):
            np.testing.assert_array_equal(b1.kernels, b2.kernels)

    def test_unit_norm_all_layers(self):
        rng = np.random.default_rng(16)
        img = rng.random((24, 24, 3))
        markers = [flim.Marker("a", 8, 8, 2, "fg"), flim.Marker("a", 18, 18, 2, "bg")]
        specs = [flim.LayerSpec(pool="max", pool_side=3, pool_stride=2), flim.LayerSpec()]
        model = flim.train_encoder({"a": img}, markers, specs, 3, seed=7)
        for _, bank in model.layers:
            np.testing.assert_allclose(np.linalg.norm(bank.kernels, axis=1), 1.0, atol=1e-6)

    def test_max_filters_cap(self):
        rng = np.random.default_rng(17)
        img = rng.random((32, 32, 3))
        markers = [flim.Marker("a", 4 + 3 * i, 16, 1, "fg") for i in range(8)]
        specs = [flim.LayerSpec(filters_per_marker=4, max_filters=10)]
        model = flim.train_encoder({"a": img}, markers, specs, 3, seed=0)
        assert len(model.layers[0][1]) <= 10


class TestModelIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(18)
        img = rng.random((24, 24, 3))
        markers = [flim.Marker("a", 8, 8, 2, "fg"), flim.Marker("a", 18, 18, 2, "bg")]
        specs = [flim.LayerSpec(pool="avg", pool_side=3, pool_stride=2), flim.LayerSpec(pool="none")]
        model = flim.train_encoder({"a": img}, markers, specs, 3, seed=1)
        path = tmp_path / "model.flim"
        flim.save_model(path, model)
        assert path.read_bytes()[:4] == b"FLIM"
        assert path.with_suffix(".flim.json").exists()
        back = flim.load_model(path)
        assert back.input_channels == model.input_channels
        for (s1, b1), (s2, b2) in zip(model.layers, back.layers):
            assert s1 == s2
            np.testing.assert_array_equal(b1.kernels, b2.kernels)
            np.testing.assert_array_equal(b1.stats.mean, b2.stats.mean)
        out1 = flim.forward_encoder(img, model)
        out2 = flim.forward_encoder(img, back)
        np.testing.assert_array_equal(out1[-1], out2[-1])

    def test_load_architecture(self, tmp_path):
        cfg = tmp_path / "arch.json"
        cfg.write_text(
            '{"input_channels": 3, "layers": [{"kernel_side": 3, "activation": "relu",'
            ' "pool": "avg", "pool_side": 3, "pool_stride": 2, "filters_per_marker": 4,'
            ' "max_filters": 200}]}'
        )
        in_ch, specs = flim.load_architecture(cfg)
        assert in_ch == 3
        assert specs[0].pool == "avg"
