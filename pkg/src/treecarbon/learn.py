"""Per-pixel features and a from-scratch random forest classifier.

The forest is deliberately self-contained: CART trees split on Gini impurity
over a random feature subset per node, trained on bootstrap resamples.  Every
random draw derives from (seed, tree index), so training is reproducible and
independent of how many workers build trees concurrently.

Class vocabulary for tree masking: 0 = not-tree, 1 = tree.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import numpy as np

from .errors import DeserializationError, ParameterError, ValidationError
from .raster import MultiSpectralImage, RasterGrid, compute_ndvi

NOT_TREE, TREE = 0, 1

FEATURE_BANDS = ("red", "green", "blue", "nir", "ndvi",
                 "texture_std", "texture_mean")

STACK_NODATA = -9999.0

MODEL_FORMAT = "treecarbon-rf"
MODEL_VERSION = 1


@dataclass
class FeatureStack(RasterGrid):
    """Seven-band feature raster; see FEATURE_BANDS for the order.

    Texture bands are the local mean / population standard deviation of NDVI
    over a ``window`` x ``window`` neighborhood and are nodata within
    window // 2 of the border.
    """

    band_names: tuple[str, ...] = FEATURE_BANDS
    window: int = 5

    def __post_init__(self):
        super().__post_init__()
        if self.bands != len(self.band_names):
            raise ValidationError(
                f"feature stack expects {len(self.band_names)} bands, "
                f"got {self.bands}")

    def vectors(self) -> np.ndarray:
        """(n_pixels, n_bands) feature matrix, row-major pixel order."""
        return self.values.reshape(self.bands, -1).T

    def valid_pixels(self) -> np.ndarray:
        """(height, width) bool: pixels where every band holds data."""
        return self.valid_mask().all(axis=0)


@dataclass
class LabeledPixels:
    """Training samples: one feature vector and one class label per row."""

    X: np.ndarray
    y: np.ndarray
    classes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValidationError("feature matrix and labels disagree in length")
        if self.classes is None:
            self.classes = np.unique(self.y)
        elif not np.isin(self.y, self.classes).all():
            raise ValidationError("labels outside the declared class vocabulary")


def extract_features(image: MultiSpectralImage, window: int = 5) -> FeatureStack:
    """Build the 7-band stack: raw bands, NDVI, and NDVI texture.

    ``window`` must be odd and >= 3.  Texture statistics use population
    variance (ddof 0).  Windows touching nodata pixels, and the window//2
    border where no full window exists, are nodata.
    """
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 3, got {window}")
    ndvi_grid = compute_ndvi(image)
    ndvi = ndvi_grid.band(0)

    work = ndvi.astype(np.float64)
    if image.nodata is not None:
        invalid = ~image.valid_mask().all(axis=0)
        work = np.where(invalid, np.nan, work)

    half = window // 2
    h, w = work.shape
    tex_mean = np.full((h, w), STACK_NODATA, dtype=np.float32)
    tex_std = np.full((h, w), STACK_NODATA, dtype=np.float32)
    if h >= window and w >= window:
        windows = np.lib.stride_tricks.sliding_window_view(work, (window, window))
        mean = windows.mean(axis=(2, 3))
        std = windows.std(axis=(2, 3))
        good = np.isfinite(mean)
        core_mean = np.where(good, mean, STACK_NODATA).astype(np.float32)
        core_std = np.where(good, std, STACK_NODATA).astype(np.float32)
        tex_mean[half:h - half, half:w - half] = core_mean
        tex_std[half:h - half, half:w - half] = core_std

    # stack-wide nodata: the image's own marker when it has one
    nodata = image.nodata if image.nodata is not None else STACK_NODATA
    bands = np.empty((7, h, w), dtype=np.float32)
    bands[0:4] = image.values
    bands[4] = ndvi
    bands[5] = np.where(tex_std == np.float32(STACK_NODATA),
                        np.float32(nodata), tex_std)
    bands[6] = np.where(tex_mean == np.float32(STACK_NODATA),
                        np.float32(nodata), tex_mean)
    return FeatureStack(image.width, image.height, 7, bands,
                        image.geo_transform, image.crs_id, nodata,
                        {}, FEATURE_BANDS, window)


@dataclass
class RFHyperparams:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int | None = None  # None -> ceil(sqrt(n_features))

    def resolve_features(self, n_features: int) -> int:
        if self.features_per_split is not None:
            m = self.features_per_split
        else:
            m = int(np.ceil(np.sqrt(n_features)))
        return max(1, min(m, n_features))


@dataclass
class _Tree:
    """Flat-array CART tree; children index -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray  # (n_nodes, n_classes) class counts; only leaves used

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            idx = node[active]
            goes_left = X[active, self.feature[idx]] < self.threshold[idx]
            node[active] = np.where(goes_left, self.left[idx], self.right[idx])
            active = self.left[node] >= 0
        counts = self.hist[node].astype(np.float64)
        return counts / counts.sum(axis=1, keepdims=True)


@dataclass
class RandomForestModel:
    trees: list
    n_features: int
    classes: np.ndarray
    seed: int
    hyper: RFHyperparams


def _gini_from_counts(counts: np.ndarray, totals: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / totals[..., None]
    return 1.0 - np.square(p).sum(axis=-1)


def _best_split(X, y_idx, n_classes, feature_ids, min_leaf):
    """Best (cost, feature, threshold) over the candidate features.

    Returns None when no split leaves both children with >= min_leaf samples
    or no feature has two distinct values.
    """
    n = len(y_idx)
    best = None
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_idx] = 1.0
    for f in feature_ids:
        vals = X[:, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        cum = np.cumsum(onehot[order], axis=0)
        total = cum[-1]
        # split after position i: left = 0..i, right = i+1..n-1
        i = np.arange(n - 1)
        usable = (sv[i] < sv[i + 1]) & (i + 1 >= min_leaf) & (n - i - 1 >= min_leaf)
        if not usable.any():
            continue
        left_n = (i + 1).astype(np.float64)
        right_n = n - left_n
        gl = _gini_from_counts(cum[:-1], left_n)
        gr = _gini_from_counts(total - cum[:-1], right_n)
        cost = (left_n * gl + right_n * gr) / n
        cost = np.where(usable, cost, np.inf)
        pos = int(np.argmin(cost))
        if best is None or cost[pos] < best[0]:
            thr = (float(sv[pos]) + float(sv[pos + 1])) / 2.0
            best = (float(cost[pos]), int(f), thr)
    return best


def _grow_tree(X, y_idx, n_classes, hyper: RFHyperparams, rng) -> _Tree:
    m = hyper.resolve_features(X.shape[1])
    feature, threshold, left, right, hist = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        hist.append(np.zeros(n_classes, dtype=np.int64))
        return len(feature) - 1

    def build(indices, depth):
        node = new_node()
        counts = np.bincount(y_idx[indices], minlength=n_classes)
        hist[node] = counts
        parent_gini = 1.0 - np.square(counts / counts.sum()).sum()
        if depth >= hyper.max_depth or len(indices) < 2 * hyper.min_leaf \
                or parent_gini == 0.0:
            return node
        feats = np.sort(rng.choice(X.shape[1], size=m, replace=False))
        split = _best_split(X[indices], y_idx[indices], n_classes, feats,
                            hyper.min_leaf)
        if split is None or parent_gini - split[0] <= 0.0:
            return node  # no split strictly decreases impurity
        _, f, thr = split
        goes_left = X[indices, f] < thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(indices[goes_left], depth + 1)
        right[node] = build(indices[~goes_left], depth + 1)
        return node

    build(np.arange(len(X)), 0)
    return _Tree(np.asarray(feature, dtype=np.int64),
                 np.asarray(threshold, dtype=np.float64),
                 np.asarray(left, dtype=np.int64),
                 np.asarray(right, dtype=np.int64),
                 np.vstack(hist))


def rf_train(data: LabeledPixels, hyper: RFHyperparams | None = None,
             seed: int = 0, n_jobs: int = 1) -> RandomForestModel:
    """Train the forest; fully deterministic given (data, hyper, seed).

    ``n_jobs`` only controls how many trees build concurrently; each tree's
    randomness derives from (seed, tree index), so the result is identical
    for any worker count.
    """
    hyper = hyper or RFHyperparams()
    if len(data.X) == 0:
        raise ParameterError("training data is empty")
    classes = np.unique(data.y)
    class_index = {c: i for i, c in enumerate(classes)}
    y_idx = np.asarray([class_index[c] for c in data.y], dtype=np.int64)
    X = np.asarray(data.X, dtype=np.float64)

    def build_one(t: int) -> _Tree:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(t,)))
        boot = rng.integers(0, len(X), size=len(X))
        return _grow_tree(X[boot], y_idx[boot], len(classes), hyper, rng)

    if n_jobs <= 1:
        trees = [build_one(t) for t in range(hyper.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build_one, range(hyper.n_trees)))
    return RandomForestModel(trees, X.shape[1], classes, seed, hyper)


def rf_predict(model: RandomForestModel, features: np.ndarray):
    """Predict labels and per-class probabilities for feature vectors.

    ``features`` is a single vector or an (n, n_features) matrix.  The
    probability vector is the mean of normalized leaf histograms across
    trees; the label is its argmax, ties resolving to the lower class id.
    """
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != model.n_features:
        raise ParameterError(
            f"feature arity {X.shape[1]} does not match model "
            f"({model.n_features})")
    probs = np.zeros((len(X), len(model.classes)))
    for tree in model.trees:
        probs += tree.predict_proba(X)
    probs /= len(model.trees)
    labels = model.classes[np.argmax(probs, axis=1)]
    if single:
        return labels[0], probs[0]
    return labels, probs


def classify_raster(model: RandomForestModel, stack: FeatureStack) -> RasterGrid:
    """Apply the model per pixel; invalid pixels get label -1."""
    valid = stack.valid_pixels()
    out = np.full((stack.height, stack.width), -1, dtype=np.int32)
    if valid.any():
        X = stack.vectors()[valid.ravel()]
        labels, _ = rf_predict(model, X)
        out[valid] = labels
    return RasterGrid(stack.width, stack.height, 1, out, stack.geo_transform,
                      stack.crs_id, nodata=-1)


def build_tree_mask(image: MultiSpectralImage, model: RandomForestModel,
                    ndvi_prefilter: float = 0.2, window: int = 5) -> RasterGrid:
    """Boolean tree mask: NDVI above threshold AND forest votes tree.

    Border pixels without texture features, and nodata pixels, are not-tree.
    """
    if set(model.classes.tolist()) != {NOT_TREE, TREE}:
        raise ParameterError(
            f"mask model must be trained on classes {{0, 1}}, "
            f"got {model.classes.tolist()}")
    if model.n_features != len(FEATURE_BANDS):
        raise ParameterError(
            f"mask model expects {model.n_features} features, stack has "
            f"{len(FEATURE_BANDS)}")
    stack = extract_features(image, window)
    ndvi = stack.band(4)
    candidates = stack.valid_pixels() & (ndvi > ndvi_prefilter)
    mask = np.zeros((image.height, image.width), dtype=bool)
    if candidates.any():
        X = stack.vectors()[candidates.ravel()]
        labels, _ = rf_predict(model, X)
        mask[candidates] = labels == TREE
    return RasterGrid(image.width, image.height, 1, mask,
                      image.geo_transform, image.crs_id, nodata=None)


def save_model(model: RandomForestModel) -> bytes:
    """Serialize to a self-describing, versioned, compressed JSON payload.

    The JSON text is canonical (sorted keys, fixed separators) and floats use
    shortest round-trip notation, so equal models serialize to equal bytes.
    """
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_features": model.n_features,
        "classes": [int(c) for c in model.classes],
        "seed": model.seed,
        "hyper": {
            "n_trees": model.hyper.n_trees,
            "max_depth": model.hyper.max_depth,
            "min_leaf": model.hyper.min_leaf,
            "features_per_split": model.hyper.features_per_split,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "hist": t.hist.tolist(),
            }
            for t in model.trees
        ],
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return b"TCRF" + zlib.compress(text.encode("utf-8"), 6)


def load_model(payload: bytes) -> RandomForestModel:
    if not payload.startswith(b"TCRF"):
        raise DeserializationError("not a serialized forest (bad magic)")
    try:
        doc = json.loads(zlib.decompress(payload[4:]).decode("utf-8"))
    except (zlib.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DeserializationError(f"corrupt model payload: {exc}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise DeserializationError(f"unexpected payload format {doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise DeserializationError(
            f"model version {doc.get('version')} not supported "
            f"(expected {MODEL_VERSION})")
    try:
        hyper = RFHyperparams(**doc["hyper"])
        trees = [
            _Tree(np.asarray(t["feature"], dtype=np.int64),
                  np.asarray(t["threshold"], dtype=np.float64),
                  np.asarray(t["left"], dtype=np.int64),
                  np.asarray(t["right"], dtype=np.int64),
                  np.asarray(t["hist"], dtype=np.int64))
            for t in doc["trees"]
        ]
        model = RandomForestModel(trees, int(doc["n_features"]),
                                  np.asarray(doc["classes"], dtype=np.int64),
                                  int(doc["seed"]), hyper)
    except (KeyError, TypeError, ValueError) as exc:
        raise DeserializationError(f"malformed model document: {exc}") from None
    for t in model.trees:
        if (t.feature >= model.n_features).any():
            raise DeserializationError("tree references a feature out of range")
        if (t.hist.sum(axis=1) == 0).any():
            raise DeserializationError("tree contains an empty histogram")
    return model


def labels_from_csv(path, stack: FeatureStack):
    """Read (x, y, class) map-coordinate labels and sample the stack.

    Returns (LabeledPixels, n_skipped); points outside the grid or on pixels
    without valid features are skipped.
    """
    rows_out = []
    labels_out = []
    skipped = 0
    valid = stack.valid_pixels()
    vectors = stack.values  # (bands, h, w)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().lower().split(",")
        if header[:3] != ["x", "y", "class"]:
            raise ValidationError(
                f"{path}: expected header 'x,y,class', got {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 columns")
            try:
                px, py, cls = float(parts[0]), float(parts[1]), int(parts[2])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            col, row = stack.geo_transform.map_to_pixel(px, py)
            col, row = int(col), int(row)
            if not (0 <= col < stack.width and 0 <= row < stack.height) \
                    or not valid[row, col]:
                skipped += 1
                continue
            rows_out.append(vectors[:, row, col].astype(np.float64))
            labels_out.append(cls)
    if not rows_out:
        raise ValidationError(f"{path}: no usable training points")
    data = LabeledPixels(np.vstack(rows_out), np.asarray(labels_out))
    return data, skipped
