"""Command-line interface.

Every subcommand is a thin wrapper around a library stage: it loads the JSON
config, runs one stage (or the whole pipeline), and exits nonzero with a
stage-named diagnostic on failure.  Log verbosity comes from the
TREECARBON_LOG environment variable (DEBUG, INFO, WARNING, ERROR).
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import carbon as carbonmod
from . import learn, pipeline, species as speciesmod, synth
from .errors import StageError, TreeCarbonError
from .geometry import points_in_ring
from .geotiff import read_geotiff, read_multispectral, write_geotiff
from .pipeline import PipelineConfig
from .species import load_species_table


def _setup_logging() -> None:
    level = os.environ.get("TREECARBON_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(config_path, seed, workers) -> PipelineConfig:
    cfg = PipelineConfig.from_file(config_path)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _run_stage(stage_name: str, fn, *args):
    try:
        return fn(*args)
    except StageError as exc:
        click.echo(f"error [{exc.stage}]: {exc.cause}", err=True)
        sys.exit(1)
    except TreeCarbonError as exc:
        click.echo(f"error [{stage_name}]: {exc}", err=True)
        sys.exit(1)
    except OSError as exc:
        click.echo(f"error [{stage_name}]: {exc} (is an earlier stage's "
                   f"output missing?)", err=True)
        sys.exit(1)


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True),
                             help="Pipeline config JSON.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Override the config seed.")
workers_option = click.option("--workers", type=int, default=None,
                              help="Override the config worker count.")


@click.group()
def main():
    """Estimate per-tree carbon stocks from imagery and LiDAR."""
    _setup_logging()


@main.command()
@config_option
@seed_option
@workers_option
def run(config_path, seed, workers):
    """Run the full pipeline and write the run report."""
    cfg = _load_config(config_path, seed, workers)
    report = _run_stage("run", pipeline.run_pipeline, cfg)
    click.echo(f"run complete: {report['counts'].get('estimated', 0)} trees, "
               f"{report['totals'].get('carbon_t', 0.0):.3f} t carbon, "
               f"artifact hash {report['artifact_hash'][:16]}")


@main.command()
@config_option
def ndvi(config_path):
    """Compute NDVI from the configured imagery."""
    cfg = _load_config(config_path, None, None)
    path = _run_stage("ndvi", pipeline.stage_ndvi, cfg)
    click.echo(f"wrote {path}")


@main.group()
def mask():
    """Tree/not-tree masking."""


@mask.command("train")
@config_option
@seed_option
@workers_option
def mask_train(config_path, seed, workers):
    cfg = _load_config(config_path, seed, workers)
    path = _run_stage("mask-train", pipeline.stage_mask_train, cfg)
    click.echo(f"wrote {path}")


@mask.command("apply")
@config_option
@workers_option
def mask_apply(config_path, workers):
    cfg = _load_config(config_path, None, workers)
    path = _run_stage("mask-apply", pipeline.stage_mask_apply, cfg)
    click.echo(f"wrote {path}")


@main.command()
@config_option
def chm(config_path):
    """Build the canopy height model from the configured LiDAR."""
    cfg = _load_config(config_path, None, None)
    path = _run_stage("chm", pipeline.stage_chm, cfg)
    if path is None:
        click.echo("no LiDAR configured; nothing to do")
    else:
        click.echo(f"wrote {path}")


@main.command()
@config_option
@workers_option
def segment(config_path, workers):
    """Watershed the tree mask into crown polygons."""
    cfg = _load_config(config_path, None, workers)
    path = _run_stage("segment", pipeline.stage_segment, cfg)
    click.echo(f"wrote {path}")


@main.group()
def species():
    """Species tables and per-crown species assignment."""


@species.command("table")
@click.option("--path", required=True, type=click.Path(exists=True))
def species_table(path):
    """Validate a species table CSV and print it."""
    try:
        table = load_species_table(path)
    except TreeCarbonError as exc:
        click.echo(f"error [species-table]: {exc}", err=True)
        sys.exit(1)
    for entry in table.entries:
        click.echo(f"{entry.label}\t{entry.name}\t{entry.rho} kg/m3")


@species.command("assign")
@config_option
def species_assign(config_path):
    """Assign species to crowns (raster majority vote or crown model)."""
    cfg = _load_config(config_path, None, None)
    path = _run_stage("species", pipeline.stage_species, cfg)
    click.echo(f"wrote {path}")


@species.command("train")
@config_option
@click.option("--survey", required=True, type=click.Path(exists=True),
              help="CSV of x,y,species ground-truth points.")
@seed_option
def species_train_cmd(config_path, survey, seed):
    """Train the crown species classifier from a tree survey."""
    cfg = _load_config(config_path, seed, None)

    def train():
        table = load_species_table(cfg.species_table)
        points = speciesmod.load_survey(survey, table)
        crowns = pipeline.import_geojson(
            Path(cfg.output_dir) / pipeline.F_CROWNS)
        image = read_multispectral(cfg.imagery)
        features, labels = [], []
        for crown in crowns:
            ring = np.asarray(crown.ring, dtype=np.float64)
            hits = [s for x, y, s in points
                    if bool(points_in_ring(np.asarray([x]), np.asarray([y]),
                                           ring)[0])]
            if not hits:
                continue
            label = int(np.argmax(np.bincount(np.asarray(hits))))
            features.append(speciesmod.crown_features(crown, image))
            labels.append(label)
        if not features:
            raise TreeCarbonError("no survey point falls inside any crown")
        model = speciesmod.species_train(np.vstack(features),
                                         np.asarray(labels), cfg.rf_hyper(),
                                         cfg.seed, cfg.workers)
        out = Path(cfg.output_dir) / "crown_model.bin"
        out.write_bytes(learn.save_model(model))
        return out

    path = _run_stage("species-train", train)
    click.echo(f"wrote {path}")


@species.command("predict")
@config_option
def species_predict(config_path):
    """Classify crowns with the configured crown model."""
    cfg = _load_config(config_path, None, None)
    if cfg.crown_model is None:
        default = Path(cfg.output_dir) / "crown_model.bin"
        if default.exists():
            cfg.crown_model = str(default)
    cfg.species_raster = None  # force the classifier path
    path = _run_stage("species", pipeline.stage_species, cfg)
    click.echo(f"wrote {path}")


@main.group()
def allometry():
    """Diameter-to-height model calibration and application."""


@allometry.command("fit")
@config_option
def allometry_fit(config_path):
    cfg = _load_config(config_path, None, None)
    path = _run_stage("allometry-fit", pipeline.stage_allometry_fit, cfg)
    if path is None:
        click.echo("no LiDAR configured; provide allometry_models instead")
    else:
        click.echo(f"wrote {path}")


@allometry.command("apply")
@config_option
def allometry_apply(config_path):
    cfg = _load_config(config_path, None, None)
    path = _run_stage("heights", pipeline.stage_heights, cfg)
    click.echo(f"wrote {path}")


@main.group()
def carbon():
    """Per-tree carbon estimation and aggregation."""


@carbon.command("estimate")
@config_option
def carbon_estimate(config_path):
    cfg = _load_config(config_path, None, None)
    path = _run_stage("carbon", pipeline.stage_carbon, cfg)
    click.echo(f"wrote {path}")


def _estimates_from_final(cfg: PipelineConfig):
    crowns = pipeline.import_geojson(
        Path(cfg.output_dir) / pipeline.F_CROWNS_FINAL)
    table = load_species_table(cfg.species_table)
    return carbonmod.estimate_crowns(crowns, table, cfg.form_factor)


@carbon.command("aggregate")
@config_option
@click.option("--regions", "regions_path", type=click.Path(exists=True),
              default=None, help="GeoJSON of region polygons (name property).")
def carbon_aggregate(config_path, regions_path):
    cfg = _load_config(config_path, None, None)

    def run_aggregate():
        estimates, skips = _estimates_from_final(cfg)
        regions = None
        if regions_path:
            doc = json.loads(Path(regions_path).read_text(encoding="utf-8"))
            regions = []
            for feat in doc.get("features", []):
                ring = np.asarray(feat["geometry"]["coordinates"][0][:-1],
                                  dtype=np.float64)
                name = feat.get("properties", {}).get("name",
                                                      f"region-{len(regions)}")
                regions.append(carbonmod.Region(name, ring))
        report = carbonmod.aggregate(estimates, regions, skips)
        out = Path(cfg.output_dir) / pipeline.F_SUMMARY
        carbonmod.write_summary_json(report, out)
        return out, report

    out, report = _run_stage("aggregate", run_aggregate)
    click.echo(f"wrote {out}: {report.total_carbon_t:.3f} t carbon over "
               f"{report.estimated} trees ({report.skipped} skipped)")


@carbon.command("density")
@config_option
@click.option("--cell-size", type=float, default=None,
              help="Output cell size in meters (default: imagery pixel).")
def carbon_density(config_path, cell_size):
    cfg = _load_config(config_path, None, None)

    def run_density():
        estimates, _ = _estimates_from_final(cfg)
        image = read_geotiff(Path(cfg.output_dir) / pipeline.F_NDVI)
        size = cell_size or image.geo_transform.pixel_size_x
        density = carbonmod.carbon_density_raster(estimates, size,
                                                  image.crs_id)
        out = Path(cfg.output_dir) / pipeline.F_DENSITY
        write_geotiff(density, out)
        return out

    out = _run_stage("density", run_density)
    click.echo(f"wrote {out}")


@main.group(name="synth")
def synth_group():
    """Synthetic scene generation."""


@synth_group.command("generate")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True),
              help="SyntheticSceneSpec JSON.")
@click.option("--table", "table_path", required=True,
              type=click.Path(exists=True), help="Species table CSV.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@seed_option
@click.option("--labels", type=int, default=0,
              help="Also emit this many tree/not-tree training labels.")
def synth_generate(spec_path, table_path, out_dir, seed, labels):
    """Generate imagery, LiDAR, species truth, and the exact tree list."""

    def generate():
        doc = json.loads(Path(spec_path).read_text(encoding="utf-8"))
        doc["species_frequencies"] = {int(k): v for k, v in
                                      doc["species_frequencies"].items()}
        doc["allometry"] = {int(k): tuple(v) for k, v in
                            doc["allometry"].items()}
        doc["signatures"] = {int(k): tuple(v) for k, v in
                             doc["signatures"].items()}
        for key in ("diameter_range", "ground_signature", "bare_signature"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if seed is not None:
            doc["seed"] = seed
        spec = synth.SyntheticSceneSpec(**doc)
        table = load_species_table(table_path)
        scene = synth.generate_synthetic_scene(spec, table)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_geotiff(scene.image, out / "imagery.tif")
        from .lidar import write_las
        write_las(scene.cloud, out / "lidar.las")
        write_geotiff(scene.species_raster.with_values(
            scene.species_raster.band(0).astype(np.float32), nodata=-1.0),
            out / "species_truth.tif")
        speciesmod.write_label_sidecar(table, out / "species_truth.tif")
        synth.write_truth_csv(scene, out / "truth.csv")
        synth.write_survey_csv(scene, table, out / "survey.csv")
        if labels:
            pts = synth.sample_training_labels(scene, labels, spec.seed + 1)
            synth.write_labels_csv(pts, out / "training_labels.csv")
        return out, scene

    out, scene = _run_stage("synth", generate)
    click.echo(f"wrote scene with {len(scene.trees)} trees "
               f"({scene.total_carbon_kg / 1000.0:.3f} t carbon) to {out}")


if __name__ == "__main__":
    main()
