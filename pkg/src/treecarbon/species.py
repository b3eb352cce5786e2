"""Species vocabulary, wood densities, and per-crown species assignment.

The species table is user-supplied CSV (label,name,rho); labels must be
contiguous from 0 and densities positive.  Crown species come either from a
species raster by pixel majority vote or from a crown-feature classifier.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientCoverageError,
    OverlapError,
    ParameterError,
    ValidationError,
)
from .geometry import raster_cells_in_ring
from .learn import LabeledPixels, RandomForestModel, RFHyperparams, rf_train
from .raster import NIR, RED, MultiSpectralImage, RasterGrid

UNCLASSIFIED = -1  # nodata label in species rasters

# crown feature vector layout
CROWN_FEATURE_NAMES = ("mean_red", "mean_green", "mean_blue", "mean_nir",
                       "std_red", "std_green", "std_blue", "std_nir",
                       "mean_ndvi", "diameter_m")


@dataclass(frozen=True)
class SpeciesEntry:
    label: int
    name: str
    rho: float  # wood dry-mass density, kg/m^3


@dataclass
class SpeciesTable:
    entries: list

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise ValidationError(f"duplicate species labels {dupes}")
        if sorted(labels) != list(range(len(labels))):
            raise ValidationError(
                f"species labels must be contiguous from 0, got {sorted(labels)}")
        for e in self.entries:
            if e.rho <= 0:
                raise ValidationError(
                    f"species {e.label} ({e.name}): rho must be positive, "
                    f"got {e.rho}")
        self._by_label = {e.label: e for e in self.entries}

    def __contains__(self, label: int) -> bool:
        return label in self._by_label

    def __len__(self) -> int:
        return len(self.entries)

    def rho(self, label: int) -> float:
        entry = self._by_label.get(label)
        if entry is None:
            raise ValidationError(f"species label {label} not in table")
        return entry.rho

    def name(self, label: int) -> str:
        entry = self._by_label.get(label)
        if entry is None:
            raise ValidationError(f"species label {label} not in table")
        return entry.name

    def label_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.label
        raise ValidationError(f"species name {name!r} not in table")

    def labels(self) -> list[int]:
        return sorted(self._by_label)


def load_species_table(path) -> SpeciesTable:
    """Read and validate a label,name,rho CSV."""
    path = Path(path)
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty species table")
        if [h.strip().lower() for h in header] != ["label", "name", "rho"]:
            raise ValidationError(
                f"{path}: expected header 'label,name,rho', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 columns")
            try:
                label = int(row[0])
                rho = float(row[2])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if rho <= 0:
                raise ValidationError(
                    f"{path}:{lineno}: rho must be positive, got {rho}")
            entries.append(SpeciesEntry(label, row[1].strip(), rho))
    if not entries:
        raise ValidationError(f"{path}: species table has no rows")
    try:
        return SpeciesTable(entries)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def assign_species_majority(polygon, species: RasterGrid) -> int | None:
    """Most frequent classified species among cells inside the crown.

    Ties resolve to the lower label; a crown over purely unclassified cells
    returns None (an outcome, not an error).
    """
    rows, cols = raster_cells_in_ring(species.geo_transform, species.width,
                                      species.height,
                                      np.asarray(polygon.ring, dtype=np.float64))
    if rows.size == 0:
        return None
    vals = species.band(0)[rows, cols]
    vals = np.round(vals.astype(np.float64)).astype(np.int64)
    nodata = UNCLASSIFIED if species.nodata is None else int(species.nodata)
    vals = vals[vals != nodata]
    vals = vals[vals >= 0]
    if vals.size == 0:
        return None
    counts = np.bincount(vals)
    return int(np.argmax(counts))


def crown_features(polygon, image: MultiSpectralImage) -> np.ndarray:
    """10-feature crown descriptor; see CROWN_FEATURE_NAMES for the layout.

    Statistics run over pixels whose centers fall in the crown ring and that
    hold valid data in every band (population std, ddof 0).
    """
    rows, cols = raster_cells_in_ring(image.geo_transform, image.width,
                                      image.height,
                                      np.asarray(polygon.ring, dtype=np.float64))
    if rows.size == 0:
        raise InsufficientCoverageError(
            f"crown {polygon.id} covers no image pixel centers")
    pixels = image.values[:, rows, cols].astype(np.float64)  # (4, n)
    if image.nodata is not None:
        good = (pixels != float(image.nodata)).all(axis=0)
        pixels = pixels[:, good]
        if pixels.shape[1] == 0:
            raise InsufficientCoverageError(
                f"crown {polygon.id} covers only nodata pixels")
    means = pixels.mean(axis=1)
    stds = pixels.std(axis=1)
    nir, red = pixels[NIR], pixels[RED]
    den = nir + red
    ndvi = np.divide(nir - red, den, out=np.zeros_like(den), where=den != 0)
    return np.concatenate([means, stds, [ndvi.mean()], [polygon.diameter_m]])


def species_train(features: np.ndarray, labels: np.ndarray,
                  hyper: RFHyperparams | None = None, seed: int = 0,
                  n_jobs: int = 1) -> RandomForestModel:
    """Train the crown-species classifier on 10-feature crown vectors."""
    data = LabeledPixels(features, labels)
    if data.X.shape[1] != len(CROWN_FEATURE_NAMES):
        raise ParameterError(
            f"crown feature vectors must have {len(CROWN_FEATURE_NAMES)} "
            f"entries, got {data.X.shape[1]}")
    return rf_train(data, hyper, seed, n_jobs)


def rasterize_species(crowns, template: RasterGrid) -> RasterGrid:
    """Paint each crown's species label over its pixels; elsewhere nodata.

    Crowns must not overlap: a pixel claimed twice raises OverlapError
    naming the crown ids involved.
    """
    out = np.full((template.height, template.width), UNCLASSIFIED,
                  dtype=np.int32)
    owner = np.zeros((template.height, template.width), dtype=np.int64)
    for crown in crowns:
        if crown.species is None:
            raise ValidationError(
                f"crown {crown.id} has no species to rasterize")
        rows, cols = raster_cells_in_ring(
            template.geo_transform, template.width, template.height,
            np.asarray(crown.ring, dtype=np.float64))
        clash = owner[rows, cols] != 0
        if clash.any():
            other = int(owner[rows, cols][clash][0])
            raise OverlapError(
                f"crowns {other} and {crown.id} overlap",
                ids=[other, crown.id])
        out[rows, cols] = crown.species
        owner[rows, cols] = crown.id
    return RasterGrid(template.width, template.height, 1, out,
                      template.geo_transform, template.crs_id,
                      nodata=UNCLASSIFIED)


def write_label_sidecar(table: SpeciesTable, raster_path) -> Path:
    """Write the label -> name JSON sidecar next to a species raster."""
    sidecar = Path(str(raster_path) + ".labels.json")
    doc = {"labels": {str(e.label): e.name for e in table.entries}}
    sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    return sidecar


def load_survey(path, table: SpeciesTable) -> list[tuple[float, float, int]]:
    """Read an (x, y, species-name) street-tree survey CSV."""
    path = Path(path)
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["x", "y", "species"]:
            raise ValidationError(
                f"{path}: expected header 'x,y,species', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 columns")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            try:
                label = table.label_of(row[2].strip())
            except ValidationError:
                raise ValidationError(
                    f"{path}:{lineno}: unknown species {row[2].strip()!r}") from None
            out.append((x, y, label))
    return out
