"""Raster data model: georeferenced grids, NDVI, tiling, and a tiny binary format.

A :class:`RasterGrid` is the carrier for everything gridded in the pipeline:
multispectral imagery, NDVI, tree masks, canopy height models, label maps and
species maps.  Grids are immutable after construction (the value buffer is
frozen) so they can be shared freely between tile workers.

Geometry convention: north-up only.  The map coordinate of the *corner* of
pixel (col=0, row=0) is ``(origin_x, origin_y)``; x grows with columns,
y shrinks with rows.  Pixel centers sit at half-pixel offsets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    IncompleteCoverageError,
    ParameterError,
    ParseError,
    ValidationError,
)

# Band order of multispectral imagery throughout the package.
RED, GREEN, BLUE, NIR = 0, 1, 2, 3

CGRID_MAGIC = b"CGRD"
CGRID_HEADER = struct.Struct("<4sIIId")  # magic, width, height, bands, pixel_size


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine georeferencing: top-left corner plus pixel sizes."""

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ParameterError(
                f"pixel sizes must be positive, got "
                f"({self.pixel_size_x}, {self.pixel_size_y})"
            )

    def pixel_center(self, col, row):
        """Map coordinate of the center of pixel (col, row)."""
        x = self.origin_x + (np.asarray(col) + 0.5) * self.pixel_size_x
        y = self.origin_y - (np.asarray(row) + 0.5) * self.pixel_size_y
        return x, y

    def map_to_pixel(self, x, y):
        """(col, row) of the pixel containing map point (x, y)."""
        col = np.floor((np.asarray(x) - self.origin_x) / self.pixel_size_x)
        row = np.floor((self.origin_y - np.asarray(y)) / self.pixel_size_y)
        return col.astype(np.int64), row.astype(np.int64)

    def shifted(self, col_off: int, row_off: int) -> "GeoTransform":
        return GeoTransform(
            self.origin_x + col_off * self.pixel_size_x,
            self.origin_y - row_off * self.pixel_size_y,
            self.pixel_size_x,
            self.pixel_size_y,
        )

    @property
    def pixel_area(self) -> float:
        return self.pixel_size_x * self.pixel_size_y


@dataclass
class RasterGrid:
    """Georeferenced multi-band pixel grid.

    ``values`` has shape (bands, height, width); each band is row-major.
    The buffer is frozen in ``__post_init__``; derive new grids instead of
    mutating.  ``meta`` carries incidental information (source dtype, stage
    provenance) and does not participate in equality.
    """

    width: int
    height: int
    bands: int
    values: np.ndarray
    geo_transform: GeoTransform
    crs_id: int = 0
    nodata: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.bands < 1:
            raise ValidationError(f"band count must be >= 1, got {self.bands}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(
                f"grid dimensions must be positive, got {self.width}x{self.height}"
            )
        v = np.asarray(self.values)
        if v.size != self.width * self.height * self.bands:
            raise ValidationError(
                f"value count {v.size} != width*height*bands "
                f"{self.width * self.height * self.bands}"
            )
        v = v.reshape(self.bands, self.height, self.width)
        if not v.flags.c_contiguous:
            v = np.ascontiguousarray(v)
        v.setflags(write=False)
        self.values = v

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        if (self.width, self.height, self.bands, self.geo_transform,
                self.crs_id) != (other.width, other.height, other.bands,
                                 other.geo_transform, other.crs_id):
            return False
        if (self.nodata is None) != (other.nodata is None):
            return False
        if self.nodata is not None and not _same_scalar(self.nodata, other.nodata):
            return False
        if self.values.dtype != other.values.dtype:
            return False
        if np.issubdtype(self.values.dtype, np.floating):
            return bool(np.array_equal(self.values, other.values, equal_nan=True))
        return bool(np.array_equal(self.values, other.values))

    def band(self, index: int) -> np.ndarray:
        """Single band as a (height, width) view."""
        return self.values[index]

    def valid_mask(self) -> np.ndarray:
        """(bands, height, width) boolean array: True where data is valid."""
        if self.nodata is None:
            return np.ones_like(self.values, dtype=bool)
        if isinstance(self.nodata, float) and np.isnan(self.nodata):
            return ~np.isnan(self.values)
        return self.values != self.values.dtype.type(self.nodata)

    def with_values(self, values: np.ndarray, bands: int | None = None,
                    nodata: float | None | str = "keep") -> "RasterGrid":
        """New grid sharing this grid's georeferencing."""
        values = np.asarray(values)
        if bands is None:
            bands = values.shape[0] if values.ndim == 3 else 1
        nd = self.nodata if nodata == "keep" else nodata
        return RasterGrid(self.width, self.height, bands, values.copy(),
                          self.geo_transform, self.crs_id, nd)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y) of the grid footprint."""
        gt = self.geo_transform
        return (gt.origin_x,
                gt.origin_y - self.height * gt.pixel_size_y,
                gt.origin_x + self.width * gt.pixel_size_x,
                gt.origin_y)


def _same_scalar(a: float, b: float) -> bool:
    return (np.isnan(a) and np.isnan(b)) or a == b


@dataclass
class MultiSpectralImage(RasterGrid):
    """Four-band image in (red, green, blue, near-infrared) order.

    ``value_range`` records the radiometric range the values live in after
    ingest (integer imagery gets rescaled to [0, 1] by the reader).
    """

    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        super().__post_init__()
        if self.bands != 4:
            raise ValidationError(
                f"multispectral image needs exactly 4 bands, got {self.bands}"
            )
        lo, hi = self.value_range
        valid = self.valid_mask()
        if valid.any():
            data = self.values[valid]
            if data.min() < lo or data.max() > hi:
                raise ValidationError(
                    f"values outside declared radiometric range [{lo}, {hi}]"
                )

    @classmethod
    def from_grid(cls, grid: RasterGrid,
                  value_range: tuple[float, float] = (0.0, 1.0)) -> "MultiSpectralImage":
        return cls(grid.width, grid.height, grid.bands, grid.values,
                   grid.geo_transform, grid.crs_id, grid.nodata,
                   dict(grid.meta), value_range)


def compute_ndvi(image: MultiSpectralImage) -> RasterGrid:
    """(NIR - R) / (NIR + R) per pixel, single-band float32 output.

    Pixels with NIR + R == 0 map to 0 so downstream thresholding stays total.
    Nodata pixels (any band) propagate the image's nodata value.
    """
    if image.bands != 4:
        raise ValidationError(f"NDVI needs a 4-band image, got {image.bands} bands")
    nir = image.band(NIR).astype(np.float64)
    red = image.band(RED).astype(np.float64)
    den = nir + red
    num = nir - red
    ndvi = np.divide(num, den, out=np.zeros_like(den), where=den != 0)
    ndvi = ndvi.astype(np.float32)
    nodata = image.nodata
    if nodata is not None:
        invalid = ~image.valid_mask().all(axis=0)
        ndvi = np.where(invalid, np.float32(nodata), ndvi)
    return RasterGrid(image.width, image.height, 1, ndvi,
                      image.geo_transform, image.crs_id, nodata)


@dataclass
class Tile:
    """One tile of a larger grid plus the core window it owns.

    ``col_off``/``row_off`` locate the tile's pixel (0, 0) in the parent grid.
    ``core`` is (col_start, col_end, row_start, row_end) in parent coordinates,
    half-open; the cores of all tiles partition the parent exactly.
    """

    grid: RasterGrid
    col_off: int
    row_off: int
    core: tuple[int, int, int, int]


def _tile_axis(length: int, tile_size: int, overlap: int):
    """Tile origins and core boundaries along one axis."""
    if length <= tile_size:
        return [0], [0, length], [min(tile_size, length)]
    step = tile_size - 2 * overlap
    n = -(-(length - tile_size) // step) + 1  # ceil division
    origins = [i * step for i in range(n - 1)] + [length - tile_size]
    bounds = [0] + [origins[i] + overlap for i in range(1, n)] + [length]
    sizes = [tile_size] * n
    return origins, bounds, sizes


def tile_grid(grid: RasterGrid, tile_size: int, overlap: int = 0) -> list[Tile]:
    """Cut ``grid`` into overlapping tiles whose core regions partition it.

    Every interior pixel belongs to exactly one tile's core; the extra
    ``overlap`` margin around each core gives window-based operators valid
    context.  Requires tile_size > 2 * overlap.
    """
    if overlap < 0:
        raise ParameterError(f"overlap must be >= 0, got {overlap}")
    if tile_size <= 2 * overlap:
        raise ParameterError(
            f"tile_size ({tile_size}) must exceed 2*overlap ({2 * overlap})"
        )
    col_origins, col_bounds, col_sizes = _tile_axis(grid.width, tile_size, overlap)
    row_origins, row_bounds, row_sizes = _tile_axis(grid.height, tile_size, overlap)
    tiles = []
    for ri, r0 in enumerate(row_origins):
        for ci, c0 in enumerate(col_origins):
            w, h = col_sizes[ci], row_sizes[ri]
            sub = grid.values[:, r0:r0 + h, c0:c0 + w]
            tgrid = RasterGrid(w, h, grid.bands, sub.copy(),
                               grid.geo_transform.shifted(c0, r0),
                               grid.crs_id, grid.nodata)
            core = (col_bounds[ci], col_bounds[ci + 1],
                    row_bounds[ri], row_bounds[ri + 1])
            tiles.append(Tile(tgrid, c0, r0, core))
    return tiles


def merge_tiles(tiles: Sequence[Tile], full_shape: tuple[int, int]) -> RasterGrid:
    """Reassemble tiles by writing back each tile's core region.

    ``full_shape`` is (width, height).  The result is independent of tile
    order; cores must partition the full grid exactly.
    """
    if not tiles:
        raise IncompleteCoverageError("no tiles to merge", missing=[(0, 0)])
    width, height = full_shape
    first = tiles[0]
    bands = first.grid.bands
    dtype = first.grid.values.dtype
    coverage = np.zeros((height, width), dtype=np.uint8)
    out = np.zeros((bands, height, width), dtype=dtype)

    ordered = sorted(tiles, key=lambda t: (t.row_off, t.col_off))
    base_gt = None
    for t in ordered:
        if t.grid.bands != bands or t.grid.values.dtype != dtype:
            raise ParameterError("tiles disagree on band count or dtype")
        gt = t.grid.geo_transform
        origin = GeoTransform(gt.origin_x - t.col_off * gt.pixel_size_x,
                              gt.origin_y + t.row_off * gt.pixel_size_y,
                              gt.pixel_size_x, gt.pixel_size_y)
        if base_gt is None:
            base_gt = origin
        elif origin != base_gt:
            raise ParameterError(
                f"tile at offset ({t.col_off}, {t.row_off}) has an inconsistent "
                f"geo_transform"
            )
        c0, c1, r0, r1 = t.core
        if not (0 <= c0 < c1 <= width and 0 <= r0 < r1 <= height):
            raise ParameterError(
                f"tile core {t.core} falls outside the {width}x{height} grid"
            )
        lc0, lr0 = c0 - t.col_off, r0 - t.row_off
        if lc0 < 0 or lr0 < 0 or (c1 - t.col_off) > t.grid.width \
                or (r1 - t.row_off) > t.grid.height:
            raise ParameterError(
                f"tile at offset ({t.col_off}, {t.row_off}) does not contain "
                f"its own core {t.core}"
            )
        out[:, r0:r1, c0:c1] = t.grid.values[:, lr0:lr0 + (r1 - r0),
                                             lc0:lc0 + (c1 - c0)]
        coverage[r0:r1, c0:c1] += 1

    if (coverage > 1).any():
        raise ParameterError("tile cores overlap; inconsistent tiling parameters")
    if (coverage == 0).any():
        raise IncompleteCoverageError(
            "tile cores do not cover the grid",
            missing=_missing_boxes(coverage))
    return RasterGrid(width, height, bands, out, base_gt,
                      first.grid.crs_id, first.grid.nodata)


def _missing_boxes(coverage: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Bounding boxes (col0, col1, row0, row1) of uncovered areas."""
    missing = coverage == 0
    boxes = []
    seen = np.zeros_like(missing)
    rows, cols = np.nonzero(missing & ~seen)
    while rows.size:
        r, c = int(rows[0]), int(cols[0])
        # grow a rectangle greedily; good enough for diagnostics
        r1 = r
        while r1 + 1 < missing.shape[0] and missing[r1 + 1, c]:
            r1 += 1
        c1 = c
        while c1 + 1 < missing.shape[1] and missing[r:r1 + 1, :][:, c1 + 1].all():
            c1 += 1
        boxes.append((c, c1 + 1, r, r1 + 1))
        seen[r:r1 + 1, c:c1 + 1] = True
        rows, cols = np.nonzero(missing & ~seen)
        if len(boxes) >= 16:
            break
    return boxes


def write_cgrid(grid: RasterGrid, path) -> None:
    """Write the plain binary grid format used by cross-language tests.

    Layout: 24-byte header -- magic ``CGRD``, u32 width, u32 height, u32
    bands, f64 pixel_size -- followed by little-endian float32 values, band
    by band, each band row-major.  Square pixels only.
    """
    gt = grid.geo_transform
    if gt.pixel_size_x != gt.pixel_size_y:
        raise ParameterError("CGRD stores a single pixel size; grid must be square-pixel")
    data = np.ascontiguousarray(grid.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CGRID_HEADER.pack(CGRID_MAGIC, grid.width, grid.height,
                                   grid.bands, gt.pixel_size_x))
        fh.write(data.tobytes())


def read_cgrid(path) -> RasterGrid:
    """Read the CGRD binary format written by :func:`write_cgrid`.

    The format carries no origin or CRS: the grid is placed with its top-left
    corner at (0, height * pixel_size) so pixel centers have positive map
    coordinates, and crs_id is 0.
    """
    raw = Path(path).read_bytes()
    if len(raw) < CGRID_HEADER.size:
        raise ParseError("CGRD header truncated", offset=len(raw))
    magic, width, height, bands, pixel_size = CGRID_HEADER.unpack_from(raw, 0)
    if magic != CGRID_MAGIC:
        raise ParseError(f"bad CGRD magic {magic!r}", offset=0)
    expected = CGRID_HEADER.size + width * height * bands * 4
    if len(raw) < expected:
        raise ParseError(
            f"CGRD payload truncated: expected {expected} bytes, got {len(raw)}",
            offset=len(raw))
    values = np.frombuffer(raw, dtype="<f4", count=width * height * bands,
                           offset=CGRID_HEADER.size).copy()
    gt = GeoTransform(0.0, height * pixel_size, pixel_size, pixel_size)
    return RasterGrid(width, height, bands, values, gt, crs_id=0)
