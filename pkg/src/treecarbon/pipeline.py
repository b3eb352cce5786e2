"""End-to-end orchestration: configuration, stages, exports, run report.

Every stage materializes its artifact under the output directory, and the
full run is just the stages executed in order, so running subcommands one at
a time over the same directory produces byte-identical outputs to a one-shot
run.  All randomness flows from the config seed; tile-level parallelism only
changes scheduling, never results.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import allometry as allo
from . import carbon as carbonmod
from . import crowns as crownsmod
from . import learn, lidar, species as speciesmod
from .errors import ConfigError, StageError, TreeCarbonError, ValidationError
from .geotiff import read_geotiff, read_multispectral, write_geotiff
from .raster import RasterGrid, compute_ndvi, tile_grid
from .species import SpeciesTable

PACKAGE_VERSION = "0.1.0"
REPORT_FORMAT = "treecarbon-run-report"
REPORT_VERSION = 1

# canonical artifact names inside the output directory
F_NDVI = "ndvi.tif"
F_MASK_MODEL = "mask_model.bin"
F_MASK = "mask.tif"
F_CHM = "chm.tif"
F_LABELS = "labels.tif"
F_CROWNS = "crowns.geojson"
F_CROWNS_SPECIES = "crowns_species.geojson"
F_ALLOMETRY = "allometry.json"
F_CROWNS_HEIGHT = "crowns_height.geojson"
F_TREE_CSV = "per_tree.csv"
F_SUMMARY = "summary.json"
F_DENSITY = "carbon_density.tif"
F_CROWNS_FINAL = "crowns_final.geojson"
F_REPORT = "run_report.json"
F_FAILED = "FAILED"

_HASHED_ARTIFACTS = (F_NDVI, F_MASK_MODEL, F_MASK, F_CHM, F_LABELS, F_CROWNS,
                     F_CROWNS_SPECIES, F_ALLOMETRY, F_CROWNS_HEIGHT,
                     F_TREE_CSV, F_SUMMARY, F_DENSITY, F_CROWNS_FINAL)


@dataclass
class PipelineConfig:
    """Inputs and parameters for a full run; see README for the JSON schema.

    Defaults marked "non-paper default" in the schema documentation are
    engineering choices exposed precisely because no published value exists.
    """

    imagery: str
    species_table: str
    output_dir: str
    lidar: str | None = None
    species_raster: str | None = None
    training_labels: str | None = None
    mask_model: str | None = None
    crown_model: str | None = None
    allometry_models: str | None = None

    ndvi_prefilter: float = 0.2
    texture_window: int = 5
    rf_trees: int = 50
    rf_max_depth: int = 12
    rf_min_leaf: int = 2
    rf_features_per_split: int | None = None
    seed: int = 0
    marker_min_distance: float = 5.0
    marker_min_height: float | None = None
    smooth_sigma: float = 1.5
    min_crown_area: float = 4.0
    chm_cell_size: float = 0.6
    min_samples: int = 5
    n_min: int = 20
    form_factor: float = 1.0
    h_floor: float = 0.0
    tile_size: int = 1024
    overlap: int = 32
    workers: int = 1

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("imagery", "species_table", "output_dir")
                   if k not in doc]
        if missing:
            raise ConfigError(f"missing required config keys: {missing}")
        cfg = cls(**doc)
        if base_dir is not None:
            for name in ("imagery", "species_table", "output_dir", "lidar",
                         "species_raster", "training_labels", "mask_model",
                         "crown_model", "allometry_models"):
                value = getattr(cfg, name)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, name, str(base_dir / value))
        return cfg

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def validate(self) -> None:
        for name in ("imagery", "species_table"):
            p = getattr(self, name)
            if not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        for name in ("lidar", "species_raster", "training_labels",
                     "mask_model", "crown_model", "allometry_models"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        if self.lidar is None and self.allometry_models is None:
            raise ConfigError(
                "no LiDAR input and no saved allometric models: heights "
                "cannot be estimated")
        if self.training_labels is None and self.mask_model is None:
            raise ConfigError(
                "no training labels and no saved mask model: the tree mask "
                "cannot be built")
        if self.tile_size <= 2 * self.overlap:
            raise ConfigError(
                f"tile_size ({self.tile_size}) must exceed 2*overlap "
                f"({2 * self.overlap})")
        if self.overlap < self.texture_window // 2:
            raise ConfigError("overlap must cover the texture window margin")
        if not -1.0 <= self.ndvi_prefilter <= 1.0:
            raise ConfigError("ndvi_prefilter must lie in [-1, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def config_hash(self) -> str:
        doc = asdict(self)
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def rf_hyper(self) -> learn.RFHyperparams:
        return learn.RFHyperparams(self.rf_trees, self.rf_max_depth,
                                   self.rf_min_leaf, self.rf_features_per_split)


# ---------------------------------------------------------------------------
# crown GeoJSON round trip

def export_geojson(crowns, path, table: SpeciesTable | None = None,
                   estimates=None) -> None:
    """RFC 7946 FeatureCollection, one Feature per crown.

    Properties always carry id, area_m2, diameter_m, pixel_count, species,
    species_name, height_m and flags; when an estimate is supplied for a
    crown its carbon_kg is included.  Coordinates are (x, y) easting-first.
    """
    by_id = {}
    if estimates:
        by_id = {e.crown_id: e for e in estimates}
    features = []
    for crown in sorted(crowns, key=lambda c: c.id):
        ring = [[float(x), float(y)] for x, y in np.asarray(crown.ring)]
        ring.append(ring[0])
        name = None
        if crown.species is not None and table is not None \
                and crown.species in table:
            name = table.name(crown.species)
        props = {
            "id": crown.id,
            "area_m2": crown.area_m2,
            "diameter_m": crown.diameter_m,
            "pixel_count": crown.pixel_count,
            "centroid": [crown.centroid[0], crown.centroid[1]],
            "species": crown.species,
            "species_name": name,
            "height_m": crown.height_m,
            "flags": list(crown.flags),
        }
        est = by_id.get(crown.id)
        props["carbon_kg"] = est.carbon_kg if est else None
        props["agb_kg"] = est.agb_kg if est else None
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": props,
        })
    doc = {"type": "FeatureCollection", "features": features}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def import_geojson(path) -> list:
    """Rebuild crown polygons from an exported FeatureCollection."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: not a FeatureCollection")
    out = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry", {})
        if geom.get("type") != "Polygon":
            raise ValidationError(f"{path}: only Polygon features supported")
        ring = np.asarray(geom["coordinates"][0][:-1], dtype=np.float64)
        props = feat.get("properties", {})
        crown = crownsmod.CrownPolygon(
            id=int(props["id"]),
            ring=ring,
            area_m2=float(props["area_m2"]),
            diameter_m=float(props["diameter_m"]),
            pixel_count=int(props.get("pixel_count", 0)),
            centroid=tuple(props.get("centroid", (0.0, 0.0))),
            species=props.get("species"),
            height_m=props.get("height_m"),
            flags=tuple(props.get("flags", ())),
        )
        out.append(crown)
    return out


# ---------------------------------------------------------------------------
# stages

def _out(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.output_dir) / name


def stage_ndvi(cfg: PipelineConfig) -> Path:
    image = read_multispectral(cfg.imagery)
    ndvi = compute_ndvi(image)
    path = _out(cfg, F_NDVI)
    write_geotiff(ndvi, path)
    return path


def stage_mask_train(cfg: PipelineConfig) -> Path:
    """Train the tree/not-tree forest from labeled map coordinates."""
    if cfg.training_labels is None:
        raise ConfigError("mask training requires training_labels")
    image = read_multispectral(cfg.imagery)
    stack = learn.extract_features(image, cfg.texture_window)
    data, skipped = learn.labels_from_csv(cfg.training_labels, stack)
    model = learn.rf_train(data, cfg.rf_hyper(), cfg.seed, cfg.workers)
    path = _out(cfg, F_MASK_MODEL)
    path.write_bytes(learn.save_model(model))
    if skipped:
        _log(cfg, f"mask training skipped {skipped} unusable label points")
    return path


def _load_mask_model(cfg: PipelineConfig) -> learn.RandomForestModel:
    model_path = cfg.mask_model or _out(cfg, F_MASK_MODEL)
    if not Path(model_path).exists():
        raise ConfigError(f"mask model not found at {model_path}")
    return learn.load_model(Path(model_path).read_bytes())


def stage_mask_apply(cfg: PipelineConfig) -> Path:
    """Tree mask over the imagery, tile-parallel when the scene is large."""
    image = read_multispectral(cfg.imagery)
    model = _load_mask_model(cfg)

    if image.width <= cfg.tile_size and image.height <= cfg.tile_size:
        mask = learn.build_tree_mask(image, model, cfg.ndvi_prefilter,
                                     cfg.texture_window)
    else:
        tiles = tile_grid(image, cfg.tile_size, cfg.overlap)

        def process(tile):
            sub = type(image).from_grid(tile.grid, image.value_range)
            local = learn.build_tree_mask(sub, model, cfg.ndvi_prefilter,
                                          cfg.texture_window)
            from .raster import Tile
            return Tile(local, tile.col_off, tile.row_off, tile.core)

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            done = list(pool.map(process, tiles))
        from .raster import merge_tiles
        mask = merge_tiles(done, (image.width, image.height))

    out = RasterGrid(mask.width, mask.height, 1,
                     mask.band(0).astype(np.float32), mask.geo_transform,
                     mask.crs_id, nodata=None)
    path = _out(cfg, F_MASK)
    write_geotiff(out, path)
    return path


def stage_chm(cfg: PipelineConfig) -> Path | None:
    if cfg.lidar is None:
        return None
    cloud = lidar.read_las(cfg.lidar)
    chm = lidar.build_chm(cloud, cfg.chm_cell_size)
    path = _out(cfg, F_CHM)
    write_geotiff(chm, path)
    return path


def _read_mask(cfg: PipelineConfig) -> RasterGrid:
    grid = read_geotiff(_out(cfg, F_MASK))
    return grid.with_values(grid.band(0) > 0.5, nodata=None)


def _resample_to(template: RasterGrid, source: RasterGrid,
                 fill: float = 0.0) -> np.ndarray:
    """Nearest-neighbor lookup of source values at template pixel centers."""
    cols, rows = np.meshgrid(np.arange(template.width),
                             np.arange(template.height))
    xs, ys = template.geo_transform.pixel_center(cols, rows)
    scol, srow = source.geo_transform.map_to_pixel(xs.ravel(), ys.ravel())
    inside = ((scol >= 0) & (scol < source.width)
              & (srow >= 0) & (srow < source.height))
    out = np.full(template.height * template.width, fill, dtype=np.float64)
    vals = source.band(0)[srow[inside], scol[inside]].astype(np.float64)
    if source.nodata is not None:
        vals = np.where(vals == np.float64(np.float32(source.nodata)),
                        fill, vals)
    out[inside.ravel() if inside.ndim > 1 else inside] = vals
    return out.reshape(template.height, template.width)


def _topography(cfg: PipelineConfig, mask: RasterGrid) -> RasterGrid:
    """Segmentation surface: smoothed CHM when LiDAR exists, else smoothed NDVI."""
    chm_path = _out(cfg, F_CHM)
    if cfg.lidar is not None and chm_path.exists():
        chm = read_geotiff(chm_path)
        surface = _resample_to(mask, chm, fill=0.0)
        source = "chm"
    else:
        ndvi = read_geotiff(_out(cfg, F_NDVI))
        surface = ndvi.band(0).astype(np.float64)
        if ndvi.nodata is not None:
            surface = np.where(
                surface == np.float64(np.float32(ndvi.nodata)), 0.0, surface)
        source = "ndvi"
    if cfg.smooth_sigma > 0:
        surface = gaussian_filter(surface, sigma=cfg.smooth_sigma)
    topo = mask.with_values(surface.astype(np.float32), nodata=None)
    topo.meta["topography_source"] = source
    return topo


def _marker_min_height(cfg: PipelineConfig, source: str) -> float:
    if cfg.marker_min_height is not None:
        return cfg.marker_min_height
    return 2.0 if source == "chm" else 0.05


def stage_segment(cfg: PipelineConfig) -> Path:
    """Watershed the mask into crowns; tile-parallel with centroid ownership."""
    mask = _read_mask(cfg)
    topo = _topography(cfg, mask)
    min_height = _marker_min_height(cfg, topo.meta["topography_source"])

    def segment_one(topo_t, mask_t, core):
        markers = crownsmod.find_markers(topo_t, mask_t,
                                         cfg.marker_min_distance, min_height)
        if len(markers) == 0:
            return []
        labels = crownsmod.watershed(topo_t, markers, mask_t)
        polys = crownsmod.polygonize(labels, min_crown_area=cfg.min_crown_area)
        if core is None:
            return polys
        kept = []
        c0, c1, r0, r1 = core
        for poly in polys:
            col, row = mask.geo_transform.map_to_pixel(*poly.centroid)
            if c0 <= col < c1 and r0 <= row < r1:
                kept.append(poly)
        return kept

    if mask.width <= cfg.tile_size and mask.height <= cfg.tile_size:
        crowns = segment_one(topo, mask, None)
    else:
        topo_tiles = tile_grid(topo, cfg.tile_size, cfg.overlap)
        mask_tiles = tile_grid(mask, cfg.tile_size, cfg.overlap)

        def process(pair):
            t, m = pair
            return segment_one(t.grid, m.grid, t.core)

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(process, zip(topo_tiles, mask_tiles)))
        crowns = [c for tile_crowns in results for c in tile_crowns]

    # global ids in north-south, west-east centroid order
    def order_key(c):
        col, row = mask.geo_transform.map_to_pixel(*c.centroid)
        return (int(row), int(col), c.centroid[1], c.centroid[0])

    crowns.sort(key=order_key)
    for i, c in enumerate(crowns):
        c.id = i + 1

    labels_img = np.zeros((mask.height, mask.width), dtype=np.int32)
    mask_arr = mask.band(0).astype(bool)
    from .geometry import raster_cells_in_ring
    for c in crowns:
        rr, cc = raster_cells_in_ring(mask.geo_transform, mask.width,
                                      mask.height, np.asarray(c.ring))
        keep = mask_arr[rr, cc]
        labels_img[rr[keep], cc[keep]] = c.id
    write_geotiff(mask.with_values(labels_img.astype(np.float32), nodata=0.0),
                  _out(cfg, F_LABELS))

    path = _out(cfg, F_CROWNS)
    export_geojson(crowns, path)
    return path


def stage_species(cfg: PipelineConfig) -> Path:
    """Assign species per crown: raster majority vote, else crown classifier."""
    table = load_table(cfg)
    crowns = import_geojson(_out(cfg, F_CROWNS))
    if cfg.species_raster is not None:
        raster = read_geotiff(cfg.species_raster)
        for crown in crowns:
            crown.species = speciesmod.assign_species_majority(crown, raster)
    elif cfg.crown_model is not None:
        model = learn.load_model(Path(cfg.crown_model).read_bytes())
        image = read_multispectral(cfg.imagery)
        for crown in crowns:
            try:
                vec = speciesmod.crown_features(crown, image)
            except TreeCarbonError:
                crown.species = None
                continue
            label, _ = learn.rf_predict(model, vec)
            crown.species = int(label)
    for crown in crowns:
        if crown.species is not None and crown.species not in table:
            raise ValidationError(
                f"crown {crown.id}: species label {crown.species} not in "
                f"the species table")
    path = _out(cfg, F_CROWNS_SPECIES)
    export_geojson(crowns, path, table)
    return path


def stage_allometry_fit(cfg: PipelineConfig) -> Path | None:
    """Calibrate diameter-to-height models from LiDAR-sampled crowns."""
    if cfg.lidar is None:
        return None
    chm = read_geotiff(_out(cfg, F_CHM))
    crowns = import_geojson(_out(cfg, F_CROWNS_SPECIES))
    samples = []
    for crown in crowns:
        try:
            h = lidar.sample_mean_height(chm, crown, cfg.min_samples)
        except TreeCarbonError:
            continue
        samples.append((crown.diameter_m, h, crown.species))
    fit = allo.fit_all_species(samples, cfg.n_min)
    path = _out(cfg, F_ALLOMETRY)
    allo.save_allometry(fit, path)
    return path


def stage_heights(cfg: PipelineConfig) -> Path:
    models_path = cfg.allometry_models or _out(cfg, F_ALLOMETRY)
    if not Path(models_path).exists():
        raise ConfigError(f"allometric models not found at {models_path}")
    fit = allo.load_allometry(models_path)
    table = load_table(cfg)
    crowns = import_geojson(_out(cfg, F_CROWNS_SPECIES))
    for crown in crowns:
        model, used_fallback = fit.model_for(crown.species)
        if model is None:
            crown.height_m = None
            continue
        est = allo.estimate_height(model, crown.diameter_m, cfg.h_floor)
        crown.height_m = est.height_m
        flags = []
        if used_fallback:
            flags.append("fallback-allometry")
        if est.extrapolated:
            flags.append("extrapolated")
        if est.clamped:
            flags.append("height-clamped")
        if flags:
            crown.with_flags(*flags)
    path = _out(cfg, F_CROWNS_HEIGHT)
    export_geojson(crowns, path, table)
    return path


def stage_carbon(cfg: PipelineConfig) -> Path:
    table = load_table(cfg)
    crowns = import_geojson(_out(cfg, F_CROWNS_HEIGHT))
    estimates, skips = carbonmod.estimate_crowns(crowns, table,
                                                 cfg.form_factor)
    carbonmod.write_tree_csv(estimates, skips, table, _out(cfg, F_TREE_CSV))
    report = carbonmod.aggregate(estimates, skips=skips)
    carbonmod.write_summary_json(report, _out(cfg, F_SUMMARY))
    image = read_geotiff(_out(cfg, F_NDVI))
    density = carbonmod.carbon_density_raster(
        estimates, image.geo_transform.pixel_size_x, image.crs_id)
    write_geotiff(density, _out(cfg, F_DENSITY))
    path = _out(cfg, F_CROWNS_FINAL)
    export_geojson(crowns, path, table, estimates)
    return path


def load_table(cfg: PipelineConfig) -> SpeciesTable:
    return speciesmod.load_species_table(cfg.species_table)


def _log(cfg: PipelineConfig, message: str) -> None:
    import logging
    logging.getLogger("treecarbon.pipeline").info(message)


STAGES = (
    ("ndvi", stage_ndvi),
    ("mask-train", stage_mask_train),
    ("mask-apply", stage_mask_apply),
    ("chm", stage_chm),
    ("segment", stage_segment),
    ("species", stage_species),
    ("allometry-fit", stage_allometry_fit),
    ("heights", stage_heights),
    ("carbon", stage_carbon),
)


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute every stage and write the run report.

    Any stage failure leaves a FAILED marker naming the stage and re-raises
    as StageError.  Returns the report document.
    """
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failed_marker = out_dir / F_FAILED
    if failed_marker.exists():
        failed_marker.unlink()

    timings = {}
    for name, fn in STAGES:
        if name == "mask-train" and cfg.training_labels is None:
            continue  # using a pre-trained model
        start = time.perf_counter()
        try:
            fn(cfg)
        except Exception as exc:
            failed_marker.write_text(f"{name}: {exc}\n", encoding="utf-8")
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - start

    report = build_report(cfg, timings)
    with open(out_dir / F_REPORT, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def build_report(cfg: PipelineConfig, timings: dict) -> dict:
    """Run report: versions, config hash, timings, artifact digests.

    ``artifact_hash`` digests only deterministic outputs (never timings), so
    reruns and different worker counts produce the same value.
    """
    out_dir = Path(cfg.output_dir)
    artifacts = {}
    for name in _HASHED_ARTIFACTS:
        p = out_dir / name
        if p.exists():
            artifacts[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    combined = hashlib.sha256()
    for name in sorted(artifacts):
        combined.update(name.encode("utf-8"))
        combined.update(bytes.fromhex(artifacts[name]))

    summary_path = out_dir / F_SUMMARY
    counts = {}
    totals = {}
    if summary_path.exists():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        counts = summary.get("counts", {})
        totals = summary.get("totals", {})

    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "package_version": PACKAGE_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "timings_s": {k: round(v, 6) for k, v in timings.items()},
        "counts": counts,
        "totals": totals,
        "artifacts": artifacts,
        "artifact_hash": combined.hexdigest(),
    }
