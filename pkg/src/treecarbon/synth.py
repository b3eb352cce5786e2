"""Synthetic scenes with exact ground truth, for tests and benchmarks.

A scene is a field of grass holding non-overlapping circular tree crowns,
with an optional bare-soil strip.  Each species has its own spectral
signature and a linear diameter-to-height law, so every tree's height, AGB
and carbon are known exactly.  LiDAR is synthesized to match: ground-classed
returns at z=0 on a regular grid plus canopy first returns at the true
height over each crown disc, which makes the canopy height model flat-topped
and the per-crown mean height equal to the true height.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .carbon import CARBON_RATIO, agb
from .errors import ParameterError, PlacementError, ValidationError
from .lidar import GROUND_CLASS, LasHeader, PointCloud
from .raster import GeoTransform, MultiSpectralImage, RasterGrid
from .species import UNCLASSIFIED, SpeciesTable

CANOPY_CLASS = 5  # ASPRS high vegetation


@dataclass
class SyntheticSceneSpec:
    extent_m: float
    tree_count: int
    species_frequencies: dict
    diameter_range: tuple[float, float]
    allometry: dict          # species -> (slope, intercept)
    signatures: dict         # species -> (r, g, b, nir) in [0, 1]
    ground_signature: tuple = (0.25, 0.35, 0.20, 0.50)
    bare_signature: tuple = (0.45, 0.40, 0.35, 0.30)
    bare_fraction: float = 0.08
    noise_level: float = 0.01
    canopy_speckle: float = 0.06
    pixel_size: float = 0.6
    lidar_spacing: float = 0.5
    min_gap_m: float = 2.4
    crs_id: int = 32618
    seed: int = 0

    def __post_init__(self):
        total = sum(self.species_frequencies.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(
                f"species frequencies must sum to 1, got {total}")
        lo, hi = self.diameter_range
        if not lo < hi:
            raise ValidationError(
                f"diameter range must have min < max, got ({lo}, {hi})")
        if self.extent_m <= 0 or self.tree_count < 0:
            raise ValidationError("extent must be positive, tree_count >= 0")
        for s in self.species_frequencies:
            if s not in self.allometry or s not in self.signatures:
                raise ValidationError(
                    f"species {s} lacks an allometry or signature entry")


@dataclass
class TrueTree:
    x: float
    y: float
    species: int
    diameter_m: float
    height_m: float
    agb_kg: float
    carbon_kg: float


@dataclass
class SyntheticScene:
    image: MultiSpectralImage
    cloud: PointCloud
    species_raster: RasterGrid
    trees: list
    spec: SyntheticSceneSpec = field(repr=False, default=None)

    @property
    def total_carbon_kg(self) -> float:
        return float(sum(t.carbon_kg for t in self.trees))


def generate_synthetic_scene(spec: SyntheticSceneSpec,
                             table: SpeciesTable) -> SyntheticScene:
    """Build image, LiDAR, species truth, and the exact tree list."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    extent = spec.extent_m
    ps = spec.pixel_size
    width = height = int(round(extent / ps))
    gt = GeoTransform(0.0, extent, ps, ps)

    trees = _place_trees(spec, table, rng)

    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    px, py = gt.pixel_center(cols, rows)

    bands = np.empty((4, height, width), dtype=np.float64)
    for b in range(4):
        bands[b] = spec.ground_signature[b]
    bare_cols = int(round(spec.bare_fraction * width))
    if bare_cols:
        for b in range(4):
            bands[b, :, :bare_cols] = spec.bare_signature[b]

    species_map = np.full((height, width), UNCLASSIFIED, dtype=np.int32)
    for t in trees:
        r = t.diameter_m / 2.0
        disc = (px - t.x) ** 2 + (py - t.y) ** 2 <= r * r
        sig = spec.signatures[t.species]
        for b in range(4):
            bands[b][disc] = sig[b]
        if spec.canopy_speckle:
            n = int(disc.sum())
            speckle = rng.normal(0.0, spec.canopy_speckle, size=(4, n))
            for b in range(4):
                bands[b][disc] += speckle[b]
        species_map[disc] = t.species

    if spec.noise_level:
        bands += rng.normal(0.0, spec.noise_level, size=bands.shape)
    np.clip(bands, 0.0, 1.0, out=bands)

    image = MultiSpectralImage(width, height, 4, bands.astype(np.float32),
                               gt, spec.crs_id, None, {}, (0.0, 1.0))
    species_raster = RasterGrid(width, height, 1, species_map, gt,
                                spec.crs_id, nodata=UNCLASSIFIED)
    cloud = _synthesize_lidar(spec, trees)
    return SyntheticScene(image, cloud, species_raster, trees, spec)


def _place_trees(spec, table, rng) -> list[TrueTree]:
    labels = sorted(spec.species_frequencies)
    freqs = np.asarray([spec.species_frequencies[s] for s in labels])
    lo, hi = spec.diameter_range
    placed: list[TrueTree] = []
    attempts = 0
    max_attempts = 200 * max(1, spec.tree_count)
    while len(placed) < spec.tree_count:
        if attempts >= max_attempts:
            raise PlacementError(
                f"placed only {len(placed)} of {spec.tree_count} trees in "
                f"{max_attempts} attempts; extent too small")
        attempts += 1
        d = float(rng.uniform(lo, hi))
        r = d / 2.0
        margin = r + spec.min_gap_m
        if 2 * margin >= spec.extent_m:
            raise PlacementError("extent smaller than a single crown footprint")
        x = float(rng.uniform(margin, spec.extent_m - margin))
        y = float(rng.uniform(margin, spec.extent_m - margin))
        ok = True
        for other in placed:
            min_dist = r + other.diameter_m / 2.0 + spec.min_gap_m
            if (x - other.x) ** 2 + (y - other.y) ** 2 < min_dist ** 2:
                ok = False
                break
        if not ok:
            continue
        s = int(labels[rng.choice(len(labels), p=freqs)])
        slope, intercept = spec.allometry[s]
        h = slope * d + intercept
        if h < 0:
            raise ValidationError(
                f"species {s} allometry yields negative height for D={d}")
        mass = agb(d, h, table.rho(s), 1.0)
        placed.append(TrueTree(x, y, s, d, h, mass, CARBON_RATIO * mass))
    return placed


def _synthesize_lidar(spec, trees) -> PointCloud:
    sp = spec.lidar_spacing
    n = int(np.floor(spec.extent_m / sp))
    coords = (np.arange(n) + 0.5) * sp
    gx, gy = np.meshgrid(coords, coords)
    xs = [gx.ravel()]
    ys = [gy.ravel()]
    zs = [np.zeros(gx.size)]
    cls = [np.full(gx.size, GROUND_CLASS, dtype=np.uint8)]

    for t in trees:
        r = t.diameter_m / 2.0
        lo = np.floor((np.array([t.x, t.y]) - r) / sp).astype(int)
        hi = np.ceil((np.array([t.x, t.y]) + r) / sp).astype(int)
        cx = (np.arange(lo[0], hi[0] + 1) + 0.5) * sp
        cy = (np.arange(lo[1], hi[1] + 1) + 0.5) * sp
        mx, my = np.meshgrid(cx, cy)
        inside = (mx - t.x) ** 2 + (my - t.y) ** 2 <= r * r
        xs.append(mx[inside])
        ys.append(my[inside])
        zs.append(np.full(int(inside.sum()), t.height_m))
        cls.append(np.full(int(inside.sum()), CANOPY_CLASS, dtype=np.uint8))

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    z = np.concatenate(zs)
    c = np.concatenate(cls)
    ret = np.ones(len(x), dtype=np.uint8)
    return PointCloud(x, y, z, ret, c, LasHeader())


def sample_training_labels(scene: SyntheticScene, n: int, seed: int,
                           edge_margin_m: float = 0.6):
    """(x, y, class) pixel labels: half tree cores, half background.

    Tree samples stay ``edge_margin_m`` inside the crown edge so crown labels
    never straddle mixed boundary pixels; background samples run right up to
    the crown edge so the classifier learns tight boundaries.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    img = scene.image
    gt = img.geo_transform
    cols, rows = np.meshgrid(np.arange(img.width), np.arange(img.height))
    px, py = gt.pixel_center(cols, rows)

    tree_core = np.zeros((img.height, img.width), dtype=bool)
    tree_any = np.zeros_like(tree_core)
    for t in scene.trees:
        r = t.diameter_m / 2.0
        d2 = (px - t.x) ** 2 + (py - t.y) ** 2
        tree_any |= d2 <= r * r
        core_r = max(r - edge_margin_m, 0.3)
        tree_core |= d2 <= core_r ** 2

    half = n // 2
    out = []
    for mask, label, want in ((tree_core, 1, half), (~tree_any, 0, n - half)):
        rr, cc = np.nonzero(mask)
        if rr.size == 0:
            raise ParameterError("scene has no pixels for one training class")
        pick = rng.choice(rr.size, size=min(want, rr.size), replace=False)
        for i in pick:
            out.append((float(px[rr[i], cc[i]]), float(py[rr[i], cc[i]]), label))
    return out


def write_labels_csv(labels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "class"])
        for x, y, cls in labels:
            writer.writerow([repr(float(x)), repr(float(y)), int(cls)])


def write_survey_csv(scene: SyntheticScene, table: SpeciesTable, path) -> None:
    """Street-tree style survey: one (x, y, species-name) row per true tree."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "species"])
        for t in scene.trees:
            writer.writerow([repr(t.x), repr(t.y), table.name(t.species)])


def write_truth_csv(scene: SyntheticScene, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "species", "D_m", "H_m", "agb_kg",
                         "carbon_kg"])
        for t in scene.trees:
            writer.writerow([repr(t.x), repr(t.y), t.species, repr(t.diameter_m),
                             repr(t.height_m), repr(t.agb_kg),
                             repr(t.carbon_kg)])
