"""Biomass and carbon arithmetic plus per-region aggregation.

Above-ground biomass treats the tree as a cylinder-shaped volume scaled by a
form factor: AGB = F * rho * (pi * D^2 / 4) * H.  Below-ground biomass is
0.3 of AGB, total biomass 1.3 of AGB, and stored carbon half of the total,
i.e. 0.65 of AGB.  Everything is computed and stored in kilograms; tons only
appear at report formatting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import AmbiguityError, ParameterError, ValidationError
from .geometry import points_in_ring, raster_cells_in_ring, ring_bbox
from .raster import GeoTransform, RasterGrid
from .species import SpeciesTable

BGB_RATIO = 0.3       # below-ground biomass as a fraction of AGB
TOTAL_RATIO = 1.3     # AGB + BGB
CARBON_RATIO = 0.65   # carbon = 0.5 * total biomass = 0.65 * AGB

DENSITY_NODATA = -9999.0


def agb(diameter_m: float, height_m: float, rho: float, form_factor: float = 1.0) -> float:
    """Above-ground biomass in kg: F * rho * (pi D^2 / 4) * H."""
    if diameter_m < 0:
        raise ParameterError(f"diameter must be >= 0, got {diameter_m}")
    if height_m < 0:
        raise ParameterError(f"height must be >= 0, got {height_m}")
    if rho <= 0:
        raise ParameterError(f"wood density must be positive, got {rho}")
    if not (0.0 < form_factor <= 1.0):
        raise ParameterError(f"form factor must be in (0, 1], got {form_factor}")
    return form_factor * rho * (math.pi * diameter_m ** 2 / 4.0) * height_m


class MassBreakdown(NamedTuple):
    agb_kg: float
    bgb_kg: float
    total_biomass_kg: float
    carbon_kg: float


def carbon_from_agb(agb_kg: float) -> MassBreakdown:
    """Derive below-ground, total, and carbon masses from AGB."""
    if agb_kg < 0:
        raise ParameterError(f"AGB must be >= 0, got {agb_kg}")
    return MassBreakdown(agb_kg, BGB_RATIO * agb_kg, TOTAL_RATIO * agb_kg,
                         CARBON_RATIO * agb_kg)


@dataclass
class CarbonEstimate:
    crown_id: int
    species: int
    form_factor: float
    rho: float
    diameter_m: float
    height_m: float
    agb_kg: float
    bgb_kg: float
    total_biomass_kg: float
    carbon_kg: float
    centroid: tuple[float, float]
    flags: tuple = ()
    crown: object = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CrownSkip:
    crown_id: int
    reason: str
    centroid: tuple[float, float] = (0.0, 0.0)


def estimate_crown(crown, table: SpeciesTable,
                   form_factor: float = 1.0) -> CarbonEstimate | CrownSkip:
    """Carbon estimate for one crown, or a skip record with the reason.

    An unclassified crown is skipped (it is an expected outcome, not an
    error); a species label missing from the table is a ValidationError.
    """
    if crown.species is None:
        return CrownSkip(crown.id, "unclassified", crown.centroid)
    if crown.species not in table:
        raise ValidationError(
            f"crown {crown.id}: species label {crown.species} not in table")
    if crown.height_m is None:
        return CrownSkip(crown.id, "no-height", crown.centroid)
    rho = table.rho(crown.species)
    mass = carbon_from_agb(agb(crown.diameter_m, crown.height_m, rho,
                               form_factor))
    return CarbonEstimate(
        crown_id=crown.id, species=crown.species, form_factor=form_factor,
        rho=rho, diameter_m=crown.diameter_m, height_m=crown.height_m,
        agb_kg=mass.agb_kg, bgb_kg=mass.bgb_kg,
        total_biomass_kg=mass.total_biomass_kg, carbon_kg=mass.carbon_kg,
        centroid=crown.centroid, flags=tuple(crown.flags), crown=crown)


def estimate_crowns(crowns, table: SpeciesTable, form_factor: float = 1.0):
    """(estimates, skips) over a crown sequence."""
    estimates, skips = [], []
    for crown in crowns:
        result = estimate_crown(crown, table, form_factor)
        if isinstance(result, CarbonEstimate):
            estimates.append(result)
        else:
            skips.append(result)
    return estimates, skips


def kahan_sum(values: Iterable[float]) -> float:
    """Compensated summation; bit-identical for any fixed input order."""
    total = 0.0
    comp = 0.0
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


@dataclass(frozen=True)
class Region:
    name: str
    ring: np.ndarray


@dataclass
class RegionTotals:
    name: str
    count: int
    agb_kg: float
    carbon_kg: float


@dataclass
class AggregateReport:
    per_region: list
    total_agb_kg: float
    total_carbon_kg: float
    estimated: int
    skipped: int
    skip_reasons: dict

    @property
    def total_carbon_t(self) -> float:
        return self.total_carbon_kg / 1000.0

    @property
    def total_agb_t(self) -> float:
        return self.total_agb_kg / 1000.0


OUT_OF_REGION = "(outside regions)"


def aggregate(estimates: Sequence[CarbonEstimate],
              regions: Sequence[Region] | None = None,
              skips: Sequence[CrownSkip] = ()) -> AggregateReport:
    """Sum estimates per region and grand-total them.

    A crown belongs to the region containing its centroid; a centroid inside
    two regions is an AmbiguityError.  Estimates are summed in crown-id order
    with compensated summation, so totals do not depend on input order, and
    the grand total is exactly the sum of the per-region totals.
    """
    ordered = sorted(estimates, key=lambda e: e.crown_id)
    regions = list(regions or [])

    buckets: dict[str, list[CarbonEstimate]] = {r.name: [] for r in regions}
    buckets[OUT_OF_REGION] = []
    for est in ordered:
        cx, cy = est.centroid
        hits = [r.name for r in regions
                if bool(points_in_ring(np.asarray([cx]), np.asarray([cy]),
                                       np.asarray(r.ring, dtype=np.float64))[0])]
        if len(hits) > 1:
            raise AmbiguityError(
                f"crown {est.crown_id} centroid falls in overlapping regions "
                f"{hits}")
        buckets[hits[0] if hits else OUT_OF_REGION].append(est)

    per_region = []
    for name in [r.name for r in regions] + [OUT_OF_REGION]:
        ests = buckets[name]
        per_region.append(RegionTotals(
            name=name, count=len(ests),
            agb_kg=kahan_sum(e.agb_kg for e in ests),
            carbon_kg=kahan_sum(e.carbon_kg for e in ests)))

    skip_reasons: dict[str, int] = {}
    for s in skips:
        skip_reasons[s.reason] = skip_reasons.get(s.reason, 0) + 1

    # grand total is the plain sum of region totals so conservation is exact
    return AggregateReport(
        per_region=per_region,
        total_agb_kg=kahan_sum(r.agb_kg for r in per_region),
        total_carbon_kg=kahan_sum(r.carbon_kg for r in per_region),
        estimated=len(ordered),
        skipped=len(skips),
        skip_reasons=skip_reasons)


def carbon_density_raster(estimates: Sequence[CarbonEstimate],
                          cell_size: float, crs_id: int = 0) -> RasterGrid:
    """kg/m^2 of stored carbon per cell, crowns spread uniformly.

    Each crown's carbon is divided evenly over the cells whose centers fall
    inside its ring; a crown too small to cover any center deposits its full
    mass in the cell containing its centroid, so total carbon is conserved.
    """
    if cell_size <= 0:
        raise ParameterError(f"cell_size must be positive, got {cell_size}")
    with_geometry = [e for e in estimates if e.crown is not None]
    if not with_geometry:
        gt = GeoTransform(0.0, cell_size, cell_size, cell_size)
        values = np.full((1, 1), DENSITY_NODATA, dtype=np.float32)
        return RasterGrid(1, 1, 1, values, gt, crs_id, nodata=DENSITY_NODATA)

    boxes = [ring_bbox(np.asarray(e.crown.ring)) for e in with_geometry]
    min_x = min(b[0] for b in boxes)
    min_y = min(b[1] for b in boxes)
    max_x = max(b[2] for b in boxes)
    max_y = max(b[3] for b in boxes)
    width = max(1, int(np.ceil((max_x - min_x) / cell_size)))
    height = max(1, int(np.ceil((max_y - min_y) / cell_size)))
    gt = GeoTransform(min_x, max_y, cell_size, cell_size)

    dense = np.zeros((height, width), dtype=np.float64)
    touched = np.zeros((height, width), dtype=bool)
    cell_area = gt.pixel_area
    for est in sorted(with_geometry, key=lambda e: e.crown_id):
        ring = np.asarray(est.crown.ring, dtype=np.float64)
        rows, cols = raster_cells_in_ring(gt, width, height, ring)
        if rows.size == 0:
            cx, cy = est.centroid
            col, row = gt.map_to_pixel(cx, cy)
            rows = np.asarray([min(max(int(row), 0), height - 1)])
            cols = np.asarray([min(max(int(col), 0), width - 1)])
        dense[rows, cols] += est.carbon_kg / (rows.size * cell_area)
        touched[rows, cols] = True

    values = np.where(touched, dense, DENSITY_NODATA).astype(np.float32)
    return RasterGrid(width, height, 1, values, gt, crs_id,
                      nodata=DENSITY_NODATA)


def write_tree_csv(estimates: Sequence[CarbonEstimate],
                   skips: Sequence[CrownSkip], table: SpeciesTable,
                   path) -> None:
    """Per-tree CSV covering both estimated and skipped crowns.

    Skipped crowns keep their id and centroid, carry the skip reason in
    ``flags``, and leave the numeric columns empty.
    """
    rows = []
    for e in estimates:
        rows.append([e.crown_id, e.centroid[0], e.centroid[1],
                     table.name(e.species), repr(e.diameter_m),
                     repr(e.height_m), repr(e.agb_kg), repr(e.carbon_kg),
                     ";".join(e.flags)])
    for s in skips:
        rows.append([s.crown_id, s.centroid[0], s.centroid[1],
                     "", "", "", "", "", f"skipped:{s.reason}"])
    rows.sort(key=lambda r: r[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "centroid_x", "centroid_y", "species", "D_m",
                         "H_m", "agb_kg", "carbon_kg", "flags"])
        for row in rows:
            writer.writerow([row[0], repr(float(row[1])), repr(float(row[2]))]
                            + row[3:])


def write_summary_json(report: AggregateReport, path) -> None:
    doc = {
        "totals": {
            "agb_kg": report.total_agb_kg,
            "carbon_kg": report.total_carbon_kg,
            "agb_t": report.total_agb_t,
            "carbon_t": report.total_carbon_t,
        },
        "counts": {
            "estimated": report.estimated,
            "skipped": report.skipped,
            "skip_reasons": dict(sorted(report.skip_reasons.items())),
        },
        "regions": [
            {"name": r.name, "count": r.count, "agb_kg": r.agb_kg,
             "carbon_kg": r.carbon_kg}
            for r in report.per_region
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
