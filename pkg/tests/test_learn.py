import numpy as np
import pytest

from treecarbon.errors import DeserializationError, ParameterError
from treecarbon.learn import (FEATURE_BANDS, LabeledPixels, RFHyperparams,
                              build_tree_mask, extract_features, load_model,
                              rf_predict, rf_train, save_model)
from treecarbon.raster import MultiSpectralImage, compute_ndvi

from conftest import make_grid, make_image


def brute_force_texture(ndvi, window):
    """Oracle: per-pixel windowed mean/std computed cell by cell."""
    h, w = ndvi.shape
    half = window // 2
    mean = np.full((h, w), np.nan)
    std = np.full((h, w), np.nan)
    for r in range(half, h - half):
        for c in range(half, w - half):
            patch = ndvi[r - half:r + half + 1, c - half:c + half + 1]
            mean[r, c] = patch.mean()
            std[r, c] = patch.std()
    return mean, std


class TestExtractFeatures:
    def test_constant_image_zero_texture(self):
        img = make_image(*(np.full((9, 9), v) for v in (0.2, 0.3, 0.1, 0.6)))
        stack = extract_features(img, window=3)
        std = stack.band(5)
        valid = std != np.float32(-9999.0)
        assert valid[1:-1, 1:-1].all()
        assert (std[valid] == 0.0).all()

    def test_ndvi_band_bit_exact(self):
        rng = np.random.default_rng(17)
        img = make_image(rng.random((12, 12)), rng.random((12, 12)),
                         rng.random((12, 12)), rng.random((12, 12)))
        stack = extract_features(img, window=5)
        assert np.array_equal(stack.band(4), compute_ndvi(img).band(0))

    def test_checkerboard_texture_matches_oracle(self):
        # NDVI checkerboard of 0/1: NIR=R gives 0, (NIR=1, R=0) gives 1
        h = w = 8
        board = (np.indices((h, w)).sum(axis=0) % 2).astype(np.float32)
        nir = np.where(board == 1, 1.0, 0.5)
        red = np.where(board == 1, 0.0, 0.5)
        img = make_image(red, np.full((h, w), 0.5), np.full((h, w), 0.5), nir)
        stack = extract_features(img, window=3)
        ndvi = compute_ndvi(img).band(0).astype(np.float64)
        mean_o, std_o = brute_force_texture(ndvi, 3)
        got_std = stack.band(5).astype(np.float64)
        got_mean = stack.band(6).astype(np.float64)
        interior = ~np.isnan(mean_o)
        np.testing.assert_allclose(got_mean[interior], mean_o[interior],
                                   rtol=0, atol=1e-6)
        np.testing.assert_allclose(got_std[interior], std_o[interior],
                                   rtol=0, atol=1e-6)
        # border is nodata
        assert (stack.band(5)[0, :] == np.float32(-9999.0)).all()

    def test_even_window_rejected(self):
        img = make_image([[0.1]], [[0.1]], [[0.1]], [[0.1]])
        with pytest.raises(ParameterError):
            extract_features(img, window=4)

    def test_band_order(self):
        assert FEATURE_BANDS == ("red", "green", "blue", "nir", "ndvi",
                                 "texture_std", "texture_mean")


def separable_dataset(n=200, seed=0):
    """Two classes split by a hyperplane with a wide margin."""
    rng = np.random.default_rng(seed)
    X = rng.normal(0, 1, size=(n, 7))
    y = (X[:, 0] + 0.5 * X[:, 4] > 0).astype(int)
    X[y == 1, 0] += 1.5
    X[y == 0, 0] -= 1.5
    return LabeledPixels(X, y)


def xor_dataset(n=400, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    return LabeledPixels(X, y)


def oracle_predict(model, x):
    """Oracle: walk every tree path independently and average histograms."""
    probs = np.zeros(len(model.classes))
    for tree in model.trees:
        node = 0
        while tree.left[node] >= 0:
            if x[tree.feature[node]] < tree.threshold[node]:
                node = tree.left[node]
            else:
                node = tree.right[node]
        hist = tree.hist[node].astype(float)
        probs += hist / hist.sum()
    probs /= len(model.trees)
    return model.classes[int(np.argmax(probs))], probs


class TestRandomForest:
    def test_single_class_degenerate(self):
        data = LabeledPixels(np.random.default_rng(0).random((20, 3)),
                             np.full(20, 7))
        model = rf_train(data, RFHyperparams(n_trees=5), seed=0)
        labels, probs = rf_predict(model, np.random.default_rng(1).random((5, 3)))
        assert (labels == 7).all()
        assert np.allclose(probs, 1.0)

    def test_empty_data_rejected(self):
        with pytest.raises(ParameterError):
            rf_train(LabeledPixels(np.zeros((0, 3)), np.zeros(0, int)))

    def test_linearly_separable_accuracy(self):
        train = separable_dataset(200, seed=0)
        test = separable_dataset(200, seed=99)
        model = rf_train(train, RFHyperparams(n_trees=25, max_depth=8), seed=3)
        labels, _ = rf_predict(model, test.X)
        accuracy = (labels == test.y).mean()
        assert accuracy >= 0.95

    def test_xor_accuracy(self):
        train = xor_dataset(400, seed=1)
        test = xor_dataset(400, seed=2)
        model = rf_train(train, RFHyperparams(n_trees=25, max_depth=6,
                                              features_per_split=2), seed=4)
        labels, _ = rf_predict(model, test.X)
        assert (labels == test.y).mean() >= 0.9

    def test_prediction_matches_oracle_traversal(self):
        train = separable_dataset(150, seed=5)
        model = rf_train(train, RFHyperparams(n_trees=10, max_depth=6), seed=6)
        rng = np.random.default_rng(7)
        X = rng.normal(0, 2, size=(50, 7))
        labels, probs = rf_predict(model, X)
        for i in range(len(X)):
            o_label, o_probs = oracle_predict(model, X[i])
            assert labels[i] == o_label
            np.testing.assert_array_equal(probs[i], o_probs)

    def test_probabilities_sum_to_one(self):
        train = xor_dataset(200, seed=8)
        model = rf_train(train, RFHyperparams(n_trees=15, max_depth=5), seed=9)
        _, probs = rf_predict(model, np.random.default_rng(10).uniform(
            -1, 1, size=(200, 2)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_argmax_equals_label_with_tiebreak(self):
        train = xor_dataset(150, seed=11)
        model = rf_train(train, RFHyperparams(n_trees=8, max_depth=4), seed=12)
        X = np.random.default_rng(13).uniform(-1, 1, size=(100, 2))
        labels, probs = rf_predict(model, X)
        assert np.array_equal(labels, model.classes[np.argmax(probs, axis=1)])

    def test_deterministic_bytes(self):
        train = separable_dataset(100, seed=20)
        a = rf_train(train, RFHyperparams(n_trees=12), seed=21, n_jobs=1)
        b = rf_train(train, RFHyperparams(n_trees=12), seed=21, n_jobs=4)
        assert save_model(a) == save_model(b)

    def test_different_seed_differs(self):
        train = separable_dataset(100, seed=20)
        a = rf_train(train, RFHyperparams(n_trees=12), seed=21)
        b = rf_train(train, RFHyperparams(n_trees=12), seed=22)
        assert save_model(a) != save_model(b)

    def test_arity_mismatch(self):
        model = rf_train(separable_dataset(50), RFHyperparams(n_trees=3))
        with pytest.raises(ParameterError):
            rf_predict(model, np.zeros((2, 9)))

    def test_feature_permutation_consistency(self):
        train = separable_dataset(120, seed=30)
        model = rf_train(train, RFHyperparams(n_trees=10, max_depth=6), seed=31)
        perm = np.random.default_rng(32).permutation(7)
        X = np.random.default_rng(33).normal(size=(40, 7))
        base_labels, base_probs = rf_predict(model, X)
        # permute feature columns and model feature indices together
        inverse = np.argsort(perm)
        for tree in model.trees:
            internal = tree.left >= 0
            tree.feature[internal] = inverse[tree.feature[internal]]
        labels, probs = rf_predict(model, X[:, perm])
        assert np.array_equal(labels, base_labels)
        np.testing.assert_array_equal(probs, base_probs)

    def test_monotone_purity(self):
        # every split strictly decreases weighted Gini impurity
        train = xor_dataset(300, seed=40)
        model = rf_train(train, RFHyperparams(n_trees=5, max_depth=6,
                                              features_per_split=2), seed=41)

        def gini(hist):
            p = hist / hist.sum()
            return 1.0 - np.square(p).sum()

        for tree in model.trees:
            for node in range(len(tree.feature)):
                if tree.left[node] < 0:
                    continue
                parent = tree.hist[node].astype(float)
                lh = tree.hist[tree.left[node]].astype(float)
                rh = tree.hist[tree.right[node]].astype(float)
                np.testing.assert_array_equal(lh + rh, parent)
                weighted = (lh.sum() * gini(lh) + rh.sum() * gini(rh)) \
                    / parent.sum()
                assert weighted < gini(parent) - 1e-15


class TestSerialization:
    def test_round_trip_identity(self):
        model = rf_train(separable_dataset(80, seed=50),
                         RFHyperparams(n_trees=6), seed=51)
        payload = save_model(model)
        back = load_model(payload)
        assert save_model(back) == payload

    def test_predictions_identical_after_round_trip(self):
        model = rf_train(separable_dataset(120, seed=52),
                         RFHyperparams(n_trees=10), seed=53)
        back = load_model(save_model(model))
        X = np.random.default_rng(54).normal(size=(1000, 7))
        labels_a, probs_a = rf_predict(model, X)
        labels_b, probs_b = rf_predict(back, X)
        assert np.array_equal(labels_a, labels_b)
        np.testing.assert_array_equal(probs_a, probs_b)

    def test_truncated_payload_never_partial(self):
        payload = save_model(rf_train(separable_dataset(50),
                                      RFHyperparams(n_trees=3)))
        with pytest.raises(DeserializationError):
            load_model(payload[:len(payload) // 2])
        with pytest.raises(DeserializationError):
            load_model(b"garbage")

    def test_version_check(self):
        import json
        import zlib
        doc = {"format": "treecarbon-rf", "version": 999}
        payload = b"TCRF" + zlib.compress(json.dumps(doc).encode())
        with pytest.raises(DeserializationError):
            load_model(payload)


def disc_scene(seed=0, size=64):
    """Grass field with three textured high-NDVI discs (the trees)."""
    rng = np.random.default_rng(seed)
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    centers = [(16, 16), (44, 20), (28, 46)]
    radius = 7
    tree = np.zeros((size, size), dtype=bool)
    for cx, cy in centers:
        tree |= (cols - cx) ** 2 + (rows - cy) ** 2 <= radius ** 2
    red = np.where(tree, 0.10, 0.25)
    green = np.where(tree, 0.30, 0.35)
    blue = np.where(tree, 0.15, 0.20)
    nir = np.where(tree, 0.70, 0.50)
    speckle = rng.normal(0, 0.05, size=(size, size))
    red = red + np.where(tree, speckle, 0)
    nir = nir - np.where(tree, speckle, 0)
    noise = rng.normal(0, 0.005, size=(4, size, size))
    img = make_image(np.clip(red + noise[0], 0, 1),
                     np.clip(green + noise[1], 0, 1),
                     np.clip(blue + noise[2], 0, 1),
                     np.clip(nir + noise[3], 0, 1))
    return img, tree


class TestBuildTreeMask:
    def train_scene_model(self, img, truth, seed=60):
        stack = extract_features(img, window=5)
        valid = stack.valid_pixels()
        rng = np.random.default_rng(seed)
        rows, cols = np.nonzero(valid)
        pick = rng.choice(rows.size, size=600, replace=False)
        X = stack.values[:, rows[pick], cols[pick]].T.astype(np.float64)
        y = truth[rows[pick], cols[pick]].astype(int)
        return rf_train(LabeledPixels(X, y),
                        RFHyperparams(n_trees=30, max_depth=10), seed=seed)

    def test_prefilter_dominates(self):
        img, truth = disc_scene()
        model = self.train_scene_model(img, truth)
        mask = build_tree_mask(img, model, ndvi_prefilter=1.0)
        assert not mask.band(0).any()

    def test_synthetic_scene_precision_recall(self):
        img, truth = disc_scene(seed=61)
        model = self.train_scene_model(img, truth, seed=62)
        mask = build_tree_mask(img, model, ndvi_prefilter=0.2).band(0)
        core = np.zeros_like(truth)
        cols, rows = np.meshgrid(np.arange(64), np.arange(64))
        for cx, cy in [(16, 16), (44, 20), (28, 46)]:
            core |= (cols - cx) ** 2 + (rows - cy) ** 2 <= 5 ** 2
        interior = np.zeros_like(truth)
        interior[3:-3, 3:-3] = True  # texture border is never predicted
        recall = mask[core & interior].mean()
        predicted = mask & interior
        precision = truth[predicted].mean() if predicted.any() else 0.0
        assert recall >= 0.9
        assert precision >= 0.9

    def test_all_nodata_image(self):
        bands = np.full((4, 10, 10), -9999.0, dtype=np.float32)
        grid = make_grid(bands, nodata=-9999.0)
        img = MultiSpectralImage.from_grid(grid)
        model = self.train_scene_model(*disc_scene(seed=63))
        mask = build_tree_mask(img, model)
        assert not mask.band(0).any()

    def test_wrong_vocabulary_rejected(self):
        data = LabeledPixels(np.random.default_rng(64).random((30, 7)),
                             np.random.default_rng(65).integers(2, 5, 30))
        model = rf_train(data, RFHyperparams(n_trees=3))
        img, _ = disc_scene()
        with pytest.raises(ParameterError):
            build_tree_mask(img, model)


class TestTieBreak:
    def test_exact_probability_tie_goes_to_lower_class(self):
        # hand-built forest: one tree, one leaf, perfectly split histogram
        from treecarbon.learn import RandomForestModel, _Tree
        tree = _Tree(feature=np.asarray([-1]), threshold=np.asarray([0.0]),
                     left=np.asarray([-1]), right=np.asarray([-1]),
                     hist=np.asarray([[5, 5]]))
        model = RandomForestModel([tree], n_features=3,
                                  classes=np.asarray([2, 7]), seed=0,
                                  hyper=RFHyperparams(n_trees=1))
        label, probs = rf_predict(model, np.zeros(3))
        assert probs.tolist() == [0.5, 0.5]
        assert label == 2  # tie resolves to the lower class id
