"""Crown delineation: marker finding, watershed segmentation, polygonization.

The watershed is a priority flood on the inverted topographic surface,
restricted to the tree mask, with 4-connectivity.  Determinism is pinned
down everywhere: marker thinning breaks ties by (higher value, row-major
order) and the flood breaks priority ties by insertion order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import EmptySegmentationError, ParameterError
from .geometry import ensure_ccw, ring_signed_area
from .raster import GeoTransform, RasterGrid

# fixed neighbor order: up, down, left, right
NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class CrownPolygon:
    """One delineated tree crown.

    ``ring`` is the exterior boundary in map coordinates, counterclockwise,
    without a repeated closing vertex.  ``diameter_m`` is the equivalent
    circle diameter 2*sqrt(area/pi).
    """

    id: int
    ring: np.ndarray
    area_m2: float
    diameter_m: float
    pixel_count: int
    centroid: tuple[float, float]
    species: int | None = None
    height_m: float | None = None
    flags: tuple = ()

    def with_flags(self, *extra: str) -> "CrownPolygon":
        self.flags = tuple(sorted(set(self.flags) | set(extra)))
        return self


def equivalent_diameter(area_m2: float) -> float:
    """Diameter of the circle with the given area: 2*sqrt(area/pi)."""
    if area_m2 < 0:
        raise ParameterError(f"area must be non-negative, got {area_m2}")
    return 2.0 * float(np.sqrt(area_m2 / np.pi))


def _as_bool_mask(mask: RasterGrid) -> np.ndarray:
    return mask.band(0).astype(bool)


def find_markers(topography: RasterGrid, mask: RasterGrid,
                 min_distance: float = 5.0, min_height: float = 0.0) -> np.ndarray:
    """Local maxima of the topography inside the mask, greedily thinned.

    Candidates below ``min_height`` are dropped; the survivors are accepted
    in (value desc, row, col) order, skipping any candidate within
    ``min_distance`` pixels (Euclidean) of an already accepted marker.
    Returns an (n, 2) array of (row, col).
    """
    if (topography.width, topography.height) != (mask.width, mask.height):
        raise ParameterError("topography and mask grids differ in shape")
    if topography.bands != 1:
        raise ParameterError("topography must be single-band")
    topo = topography.band(0).astype(np.float64)
    m = _as_bool_mask(mask)
    if topography.nodata is not None:
        m = m & (topography.band(0) != np.float32(topography.nodata))
    work = np.where(m, topo, -np.inf)

    h, w = work.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = work
    is_max = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            is_max &= work >= padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    is_max &= m & (work >= min_height)

    rows, cols = np.nonzero(is_max)
    if rows.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    vals = work[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    rows, cols = rows[order], cols[order]

    accepted_r: list[int] = []
    accepted_c: list[int] = []
    limit_sq = float(min_distance) ** 2
    for r, c in zip(rows, cols):
        ar = np.asarray(accepted_r)
        ac = np.asarray(accepted_c)
        if ar.size and (((ar - r) ** 2 + (ac - c) ** 2) < limit_sq).any():
            continue
        accepted_r.append(int(r))
        accepted_c.append(int(c))
    return np.column_stack([accepted_r, accepted_c]).astype(np.int64)


def watershed(topography: RasterGrid, markers: np.ndarray,
              mask: RasterGrid) -> RasterGrid:
    """Priority-flood watershed restricted to the mask.

    Marker i (row order) seeds basin label i+1.  Pixels are claimed in
    descending topography order; equal priorities resolve by insertion
    order, which makes the result independent of any execution schedule.
    """
    markers = np.asarray(markers)
    if markers.size == 0:
        raise EmptySegmentationError("watershed needs at least one marker")
    m = _as_bool_mask(mask)
    topo = topography.band(0).astype(np.float64)
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)

    heap: list = []
    counter = 0
    for i, (r, c) in enumerate(markers):
        r, c = int(r), int(c)
        if not (0 <= r < h and 0 <= c < w) or not m[r, c]:
            raise ParameterError(f"marker ({r}, {c}) falls outside the mask")
        labels[r, c] = i + 1
        heapq.heappush(heap, (-topo[r, c], counter, r, c))
        counter += 1

    while heap:
        _, _, r, c = heapq.heappop(heap)
        lab = labels[r, c]
        for dr, dc in NEIGHBORS_4:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and m[nr, nc] and labels[nr, nc] == 0:
                labels[nr, nc] = lab
                heapq.heappush(heap, (-topo[nr, nc], counter, nr, nc))
                counter += 1

    return RasterGrid(mask.width, mask.height, 1, labels,
                      mask.geo_transform, mask.crs_id, nodata=0)


def _trace_rings(region: np.ndarray, row0: int, col0: int,
                 gt: GeoTransform) -> list[np.ndarray]:
    """Boundary loops of a 4-connected region, pixel-edge accurate.

    ``region`` is a cropped boolean mask at offset (row0, col0) in the parent
    grid.  Directed edges keep the region on the walker's right in pixel
    space; pinched corners resolve by preferring the right turn, so loops
    never cross (they may touch at isolated corners).
    """
    h, w = region.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = region

    # outgoing[corner] -> list of end corners, in (x, y) pixel units
    outgoing: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(a, b):
        outgoing.setdefault(a, []).append(b)

    rows, cols = np.nonzero(region)
    for r, c in zip(rows, cols):
        if not pad[r, c + 1]:       # top neighbor missing
            add((c, r), (c + 1, r))
        if not pad[r + 2, c + 1]:   # bottom
            add((c + 1, r + 1), (c, r + 1))
        if not pad[r + 1, c]:       # left
            add((c, r + 1), (c, r))
        if not pad[r + 1, c + 2]:   # right
            add((c + 1, r), (c + 1, r + 1))

    def pick(corner, direction):
        options = outgoing.get(corner)
        if not options:
            return None
        if len(options) == 1:
            return options.pop()
        # pinch: prefer the right turn relative to the incoming direction
        dx, dy = direction
        for cand_dir in ((-dy, dx), (dx, dy), (dy, -dx)):
            target = (corner[0] + cand_dir[0], corner[1] + cand_dir[1])
            if target in options:
                options.remove(target)
                return target
        return options.pop()

    loops = []
    starts = sorted(outgoing)
    for start in starts:
        while outgoing.get(start):
            first = outgoing[start].pop(0)
            loop = [start, first]
            direction = (first[0] - start[0], first[1] - start[1])
            cur = first
            while cur != start:
                nxt = pick(cur, direction)
                if nxt is None:
                    raise AssertionError("open boundary loop")
                direction = (nxt[0] - cur[0], nxt[1] - cur[1])
                loop.append(nxt)
                cur = nxt
            loops.append(loop[:-1])

    rings = []
    for loop in loops:
        pts = np.asarray(loop, dtype=np.float64)
        xs = gt.origin_x + (pts[:, 0] + col0) * gt.pixel_size_x
        ys = gt.origin_y - (pts[:, 1] + row0) * gt.pixel_size_y
        ring = _drop_collinear(np.column_stack([xs, ys]))
        rings.append(ring)
    return rings


def _drop_collinear(ring: np.ndarray) -> np.ndarray:
    prev = np.roll(ring, 1, axis=0)
    nxt = np.roll(ring, -1, axis=0)
    cross = ((ring[:, 0] - prev[:, 0]) * (nxt[:, 1] - ring[:, 1])
             - (ring[:, 1] - prev[:, 1]) * (nxt[:, 0] - ring[:, 0]))
    keep = cross != 0
    return ring[keep] if keep.any() else ring


def polygonize(labels: RasterGrid, geo_transform: GeoTransform | None = None,
               min_crown_area: float = 0.0) -> list[CrownPolygon]:
    """Vectorize each positive label into a crown polygon.

    Area is pixel count times pixel area (interior holes excluded); regions
    below ``min_crown_area`` square meters are dropped.  Only the exterior
    ring is emitted.
    """
    gt = geo_transform or labels.geo_transform
    lab = labels.band(0).astype(np.int64)
    pixel_area = gt.pixel_area

    out = []
    ids = np.unique(lab)
    ids = ids[ids > 0]
    for label_id in ids:
        where = lab == label_id
        rows, cols = np.nonzero(where)
        count = rows.size
        area = count * pixel_area
        if area < min_crown_area:
            continue
        r0, r1 = int(rows.min()), int(rows.max())
        c0, c1 = int(cols.min()), int(cols.max())
        region = where[r0:r1 + 1, c0:c1 + 1]
        rings = _trace_rings(region, r0, c0, gt)
        exterior = max(rings, key=lambda rg: abs(ring_signed_area(rg)))
        exterior = ensure_ccw(exterior)
        cx, cy = gt.pixel_center(cols, rows)
        out.append(CrownPolygon(
            id=int(label_id),
            ring=exterior,
            area_m2=float(area),
            diameter_m=equivalent_diameter(float(area)),
            pixel_count=int(count),
            centroid=(float(np.mean(cx)), float(np.mean(cy))),
        ))
    return out
