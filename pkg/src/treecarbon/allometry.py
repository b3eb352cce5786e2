"""Per-species linear crown-diameter to height models, LiDAR calibrated.

Ordinary least squares in closed form.  Species with too few samples fall
back to a pooled model fit over all species; reports flag which crowns used
the fallback and which predictions extrapolate beyond the training range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    CalibrationError,
    DeserializationError,
    InsufficientDataError,
    ParameterError,
    SingularFitError,
)

POOLED = -1  # species id of the pooled fallback model

ALLOMETRY_FORMAT = "treecarbon-allometry"
ALLOMETRY_VERSION = 1


@dataclass
class AllometricModel:
    species: int
    slope: float       # meters height per meter diameter
    intercept: float   # meters
    n: int
    r2: float
    d_range: tuple[float, float]


class HeightEstimate(NamedTuple):
    height_m: float
    extrapolated: bool
    clamped: bool


def fit_allometry(pairs, species: int) -> AllometricModel:
    """Least-squares line through (diameter, height) pairs.

    Needs at least two pairs with two distinct diameters; diameters must be
    positive and heights non-negative.
    """
    arr = np.asarray(list(pairs), dtype=np.float64)
    if len(arr) < 2:
        raise InsufficientDataError(
            f"species {species}: need >= 2 samples, got {len(arr)}")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ParameterError("pairs must be (D, H) tuples")
    d, h = arr[:, 0], arr[:, 1]
    if (d <= 0).any():
        raise ParameterError("diameters must be positive")
    if (h < 0).any():
        raise ParameterError("heights must be non-negative")
    d_mean = d.mean()
    h_mean = h.mean()
    sxx = float(np.sum((d - d_mean) ** 2))
    if sxx == 0.0:
        raise SingularFitError(
            f"species {species}: all {len(d)} diameters identical ({d[0]})")
    sxy = float(np.sum((d - d_mean) * (h - h_mean)))
    slope = sxy / sxx
    intercept = h_mean - slope * d_mean
    residuals = h - (slope * d + intercept)
    ss_res = float(np.sum(residuals ** 2))
    ss_tot = float(np.sum((h - h_mean) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    r2 = min(1.0, max(0.0, r2))  # guard rounding at the [0, 1] edges
    return AllometricModel(species, slope, intercept, len(d), r2,
                           (float(d.min()), float(d.max())))


def estimate_height(model: AllometricModel, diameter: float,
                    h_floor: float = 0.0) -> HeightEstimate:
    """Predict height from diameter; clamp below at ``h_floor``.

    Extrapolation beyond the training diameter range is allowed but flagged.
    """
    if diameter <= 0:
        raise ParameterError(f"diameter must be positive, got {diameter}")
    raw = model.slope * diameter + model.intercept
    clamped = raw < h_floor
    extrapolated = not (model.d_range[0] <= diameter <= model.d_range[1])
    return HeightEstimate(max(raw, h_floor), extrapolated, clamped)


@dataclass
class AllometrySet:
    """Per-species models plus the pooled fallback."""

    models: dict
    fallback: AllometricModel | None

    def model_for(self, species: int | None):
        """(model, used_fallback) for a species; None when nothing applies."""
        if species is not None and species in self.models:
            return self.models[species], False
        if self.fallback is not None:
            return self.fallback, True
        return None, False


def fit_all_species(samples: Iterable[tuple[float, float, int]],
                    n_min: int = 20) -> AllometrySet:
    """Fit one model per species with >= n_min samples plus a pooled fallback.

    ``samples`` yields (diameter, height, species); species None contributes
    to the pooled fit only.  Raises CalibrationError when no species reaches
    n_min and the pooled fit is impossible.
    """
    by_species: dict[int, list] = {}
    pooled: list = []
    for d, h, s in samples:
        if s is not None:
            by_species.setdefault(int(s), []).append((d, h))
        pooled.append((d, h))

    models = {}
    for s in sorted(by_species):
        pts = by_species[s]
        if len(pts) < n_min:
            continue
        try:
            models[s] = fit_allometry(pts, s)
        except SingularFitError:
            continue  # degenerate species falls back to the pooled model

    fallback = None
    try:
        fallback = fit_allometry(pooled, POOLED)
    except (InsufficientDataError, SingularFitError):
        fallback = None

    if not models and fallback is None:
        raise CalibrationError(
            "no species reached the sample minimum and the pooled fit is "
            "impossible")
    return AllometrySet(models, fallback)


def _model_doc(m: AllometricModel) -> dict:
    return {"species": m.species, "slope": m.slope, "intercept": m.intercept,
            "n": m.n, "r2": m.r2, "d_min": m.d_range[0], "d_max": m.d_range[1]}


def _model_from_doc(doc: dict) -> AllometricModel:
    return AllometricModel(int(doc["species"]), float(doc["slope"]),
                           float(doc["intercept"]), int(doc["n"]),
                           float(doc["r2"]),
                           (float(doc["d_min"]), float(doc["d_max"])))


def save_allometry(fit: AllometrySet, path) -> None:
    doc = {
        "format": ALLOMETRY_FORMAT,
        "version": ALLOMETRY_VERSION,
        "models": [_model_doc(fit.models[s]) for s in sorted(fit.models)],
        "fallback": _model_doc(fit.fallback) if fit.fallback else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_allometry(path) -> AllometrySet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DeserializationError(f"{path}: invalid JSON: {exc}") from None
    if doc.get("format") != ALLOMETRY_FORMAT:
        raise DeserializationError(
            f"{path}: unexpected format {doc.get('format')!r}")
    if doc.get("version") != ALLOMETRY_VERSION:
        raise DeserializationError(
            f"{path}: version {doc.get('version')} not supported")
    try:
        models = {int(d["species"]): _model_from_doc(d) for d in doc["models"]}
        fallback = _model_from_doc(doc["fallback"]) if doc.get("fallback") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise DeserializationError(f"{path}: malformed model entry: {exc}") from None
    return AllometrySet(models, fallback)
