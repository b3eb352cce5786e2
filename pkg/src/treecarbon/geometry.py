"""Planar ring geometry shared by the sampling and aggregation stages.

Rings are (n, 2) float arrays of map-coordinate vertices with implicit
closure (last vertex connects back to the first).  Exterior rings are
counterclockwise in the x-east / y-north frame.
"""

from __future__ import annotations

import numpy as np


def ring_signed_area(ring: np.ndarray) -> float:
    """Shoelace area; positive for counterclockwise rings."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def ensure_ccw(ring: np.ndarray) -> np.ndarray:
    return ring if ring_signed_area(ring) >= 0 else ring[::-1].copy()


def ring_bbox(ring: np.ndarray) -> tuple[float, float, float, float]:
    return (float(ring[:, 0].min()), float(ring[:, 1].min()),
            float(ring[:, 0].max()), float(ring[:, 1].max()))


def points_in_ring(xs: np.ndarray, ys: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd containment test, vectorized over the query points.

    Points exactly on an edge are resolved by the half-open crossing rule;
    grids aligned with pixel-edge rings never place centers on edges.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(ring)
    x1 = ring[:, 0]
    y1 = ring[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    for i in range(n):
        crosses = (y1[i] > ys) != (y2[i] > ys)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1[i] + (ys - y1[i]) * (x2[i] - x1[i]) / (y2[i] - y1[i])
        inside ^= crosses & (xs < xint)
    return inside


def raster_cells_in_ring(geo_transform, width: int, height: int,
                         ring: np.ndarray):
    """(rows, cols) of grid cells whose centers fall inside the ring.

    Only the ring's bounding box is scanned, so cost is proportional to the
    ring footprint rather than the raster.
    """
    min_x, min_y, max_x, max_y = ring_bbox(ring)
    gt = geo_transform
    c0 = max(0, int(np.floor((min_x - gt.origin_x) / gt.pixel_size_x)))
    c1 = min(width - 1, int(np.floor((max_x - gt.origin_x) / gt.pixel_size_x)))
    r0 = max(0, int(np.floor((gt.origin_y - max_y) / gt.pixel_size_y)))
    r1 = min(height - 1, int(np.floor((gt.origin_y - min_y) / gt.pixel_size_y)))
    if c1 < c0 or r1 < r0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    cx, cy = gt.pixel_center(cols, rows)
    hit = points_in_ring(cx.ravel(), cy.ravel(), ring)
    return rows.ravel()[hit], cols.ravel()[hit]
