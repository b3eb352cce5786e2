"""LAS point clouds, surface rasterization, and canopy height models.

Reads uncompressed LAS 1.2-1.4 with point record formats 0-3 and writes
LAS 1.2 format 0.  The canopy height model is DSM minus DTM: DSM is the
per-cell maximum of first returns, DTM the per-cell mean of ground-classified
returns with nearest-neighbor fill, and negative differences clamp to zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import (
    EmptySelectionError,
    InsufficientCoverageError,
    NoGroundSurfaceError,
    ParameterError,
    ParseError,
    QuantizationOverflowError,
    UnsupportedFormatError,
    ValidationError,
)
from .raster import GeoTransform, RasterGrid

GROUND_CLASS = 2  # ASPRS standard classification code

NODATA = -9999.0

# point record length by point data record format
_PDRF_SIZE = {0: 20, 1: 28, 2: 26, 3: 34}

_HEADER_12 = struct.Struct("<4sHH16sBB32s32sHHHIIBHI5I12d")
_HEADER_12_SIZE = 227


@dataclass
class LasHeader:
    version: tuple[int, int] = (1, 2)
    point_format: int = 0
    point_count: int = 0
    scale: tuple[float, float, float] = (0.001, 0.001, 0.001)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mins: tuple[float, float, float] = (0.0, 0.0, 0.0)
    maxs: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class PointCloud:
    """De-quantized LiDAR returns with per-point classification."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_number: np.ndarray
    classification: np.ndarray
    header: LasHeader = field(default_factory=LasHeader)

    def __post_init__(self):
        n = len(self.x)
        for name in ("y", "z", "return_number", "classification"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"point attribute '{name}' length mismatch")
        if n and not (np.isfinite(self.x).all() and np.isfinite(self.y).all()
                      and np.isfinite(self.z).all()):
            raise ValidationError("point coordinates must be finite")
        self.header.point_count = n
        if n:
            self.header.mins = (float(self.x.min()), float(self.y.min()),
                                float(self.z.min()))
            self.header.maxs = (float(self.x.max()), float(self.y.max()),
                                float(self.z.max()))

    def __len__(self) -> int:
        return len(self.x)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y)."""
        return (self.header.mins[0], self.header.mins[1],
                self.header.maxs[0], self.header.maxs[1])


def first_returns(cloud: PointCloud) -> np.ndarray:
    return cloud.return_number == 1


def ground_points(cloud: PointCloud) -> np.ndarray:
    return cloud.classification == GROUND_CLASS


def read_las(path) -> PointCloud:
    """Parse an uncompressed LAS file (versions 1.2-1.4, formats 0-3)."""
    path = str(path)
    data = Path(path).read_bytes()
    if len(data) < _HEADER_12_SIZE:
        raise ParseError(f"{path}: file shorter than a LAS header", offset=len(data))
    if data[:4] != b"LASF":
        raise ParseError(f"{path}: bad signature {data[:4]!r}", offset=0)
    major, minor = data[24], data[25]
    if (major, minor) not in ((1, 2), (1, 3), (1, 4)):
        raise UnsupportedFormatError(
            f"{path}: LAS version {major}.{minor} not supported (1.2-1.4 only)")
    header_size = struct.unpack_from("<H", data, 94)[0]
    point_offset = struct.unpack_from("<I", data, 96)[0]
    raw_format = data[104]
    if raw_format & 0x80:
        raise UnsupportedFormatError(
            f"{path}: LAZ compression (point format bit 7) not supported")
    pdrf = raw_format & 0x7F
    if pdrf not in _PDRF_SIZE:
        raise UnsupportedFormatError(
            f"{path}: point data record format {pdrf} not supported (0-3 only)")
    record_len = struct.unpack_from("<H", data, 105)[0]
    if record_len < _PDRF_SIZE[pdrf]:
        raise ParseError(
            f"{path}: record length {record_len} shorter than format {pdrf} "
            f"minimum {_PDRF_SIZE[pdrf]}", offset=105)
    count = struct.unpack_from("<I", data, 107)[0]
    if (major, minor) == (1, 4) and header_size >= 375:
        count64 = struct.unpack_from("<Q", data, 247)[0]
        if count64:
            count = count64
    scale = struct.unpack_from("<3d", data, 131)
    offset = struct.unpack_from("<3d", data, 155)

    need = point_offset + count * record_len
    if len(data) < need:
        raise ParseError(
            f"{path}: header promises {count} points "
            f"({need} bytes), file has {len(data)}", offset=len(data))

    if count == 0:
        empty = np.empty(0)
        return PointCloud(empty, empty.copy(), empty.copy(),
                          np.empty(0, np.uint8), np.empty(0, np.uint8),
                          LasHeader((major, minor), pdrf, 0, scale, offset))

    base = [("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"),
            ("flags", "u1"), ("raw_class", "u1"), ("scan_angle", "i1"),
            ("user", "u1"), ("source", "<u2")]
    pad = record_len - _PDRF_SIZE[pdrf]
    if pdrf in (1, 3):
        base.append(("gps", "<f8"))
    if pdrf in (2, 3):
        base.extend([("r", "<u2"), ("g", "<u2"), ("b", "<u2")])
    if pad:
        base.append(("extra", f"V{pad}"))
    recs = np.frombuffer(data, dtype=np.dtype(base), count=count,
                         offset=point_offset)

    x = recs["X"].astype(np.float64) * scale[0] + offset[0]
    y = recs["Y"].astype(np.float64) * scale[1] + offset[1]
    z = recs["Z"].astype(np.float64) * scale[2] + offset[2]
    ret = (recs["flags"] & 0x07).astype(np.uint8)
    cls = (recs["raw_class"] & 0x1F).astype(np.uint8)
    header = LasHeader((major, minor), pdrf, count, tuple(scale), tuple(offset))
    return PointCloud(x, y, z, ret, cls, header)


def write_las(cloud: PointCloud, path,
              scale: tuple[float, float, float] = (0.001, 0.001, 0.001)) -> None:
    """Write LAS 1.2, point format 0.

    Coordinates are quantized to the given scale; values that do not fit the
    signed 32-bit record raise QuantizationOverflowError.  The header carries
    no timestamps, so identical clouds produce identical bytes.
    """
    n = len(cloud)
    offset = (0.0, 0.0, 0.0)
    quant = []
    for axis, (vals, sc, off) in enumerate(
            zip((cloud.x, cloud.y, cloud.z), scale, offset)):
        q = np.round((np.asarray(vals, dtype=np.float64) - off) / sc)
        if n and (np.abs(q) > 2**31 - 1).any():
            raise QuantizationOverflowError(
                f"axis {'xyz'[axis]} exceeds the representable range at "
                f"scale {sc}")
        quant.append(q.astype(np.int32))

    by_return = [int((cloud.return_number == r).sum()) for r in range(1, 6)]
    if n:
        deq = [quant[i].astype(np.float64) * scale[i] + offset[i] for i in range(3)]
        mins = [float(d.min()) for d in deq]
        maxs = [float(d.max()) for d in deq]
    else:
        mins = maxs = [0.0, 0.0, 0.0]

    header = _HEADER_12.pack(
        b"LASF", 0, 0, b"\0" * 16, 1, 2,
        b"TREECARBON".ljust(32, b"\0"), b"treecarbon 0.1".ljust(32, b"\0"),
        0, 0,  # creation day/year deliberately fixed for reproducible bytes
        _HEADER_12_SIZE, _HEADER_12_SIZE, 0, 0, 20, n,
        *by_return,
        scale[0], scale[1], scale[2], offset[0], offset[1], offset[2],
        maxs[0], mins[0], maxs[1], mins[1], maxs[2], mins[2])
    assert len(header) == _HEADER_12_SIZE

    recs = np.zeros(n, dtype=np.dtype([
        ("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"),
        ("flags", "u1"), ("raw_class", "u1"), ("scan_angle", "i1"),
        ("user", "u1"), ("source", "<u2")]))
    recs["X"], recs["Y"], recs["Z"] = quant
    recs["flags"] = np.asarray(cloud.return_number, dtype=np.uint8) & 0x07
    recs["raw_class"] = np.asarray(cloud.classification, dtype=np.uint8) & 0x1F

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(recs.tobytes())


def rasterize_surface(cloud: PointCloud, predicate: Callable, cell_size: float,
                      reducer: str = "max") -> RasterGrid:
    """Reduce filtered point z-values onto a grid aligned to the cloud bbox.

    ``reducer`` is one of max, min, mean.  Cells containing no filtered point
    hold the nodata value.
    """
    if cell_size <= 0:
        raise ParameterError(f"cell_size must be positive, got {cell_size}")
    if reducer not in ("max", "min", "mean"):
        raise ParameterError(f"unknown reducer {reducer!r}")
    if len(cloud) == 0:
        raise EmptySelectionError("point cloud is empty")
    keep = np.asarray(predicate(cloud), dtype=bool)
    if not keep.any():
        raise EmptySelectionError("no points pass the filter")

    min_x, min_y, max_x, max_y = cloud.bounds
    width = max(1, int(np.ceil((max_x - min_x) / cell_size)))
    height = max(1, int(np.ceil((max_y - min_y) / cell_size)))
    gt = GeoTransform(min_x, max_y, cell_size, cell_size)

    xs = cloud.x[keep]
    ys = cloud.y[keep]
    zs = cloud.z[keep].astype(np.float64)
    cols = np.clip(((xs - min_x) / cell_size).astype(np.int64), 0, width - 1)
    rows = np.clip(((max_y - ys) / cell_size).astype(np.int64), 0, height - 1)
    flat = rows * width + cols

    if reducer == "mean":
        total = np.zeros(width * height)
        count = np.zeros(width * height)
        np.add.at(total, flat, zs)
        np.add.at(count, flat, 1.0)
        with np.errstate(invalid="ignore"):
            surface = np.where(count > 0, total / np.maximum(count, 1), NODATA)
    else:
        init = -np.inf if reducer == "max" else np.inf
        surface = np.full(width * height, init)
        op = np.maximum if reducer == "max" else np.minimum
        op.at(surface, flat, zs)
        surface = np.where(np.isfinite(surface), surface, NODATA)

    values = surface.reshape(height, width).astype(np.float32)
    return RasterGrid(width, height, 1, values, gt, nodata=NODATA)


def _fill_nearest(band: np.ndarray, nodata: float) -> np.ndarray:
    """Replace nodata cells with the value of the nearest valid cell."""
    empty = band == np.float32(nodata)
    if not empty.any():
        return band
    _, (ri, ci) = distance_transform_edt(empty, return_indices=True)
    return band[ri, ci]


def build_chm(cloud: PointCloud, cell_size: float) -> RasterGrid:
    """Canopy height model: max-of-first-returns minus interpolated terrain.

    Requires at least one ground-classified point.  Cells without any first
    return are nodata; heights clamp below at zero.
    """
    if not ground_points(cloud).any():
        raise NoGroundSurfaceError(
            "point cloud holds no ground-classified (class 2) points")
    dsm = rasterize_surface(cloud, first_returns, cell_size, "max")
    dtm = rasterize_surface(cloud, ground_points, cell_size, "mean")
    dtm_filled = _fill_nearest(dtm.band(0), NODATA)
    dsm_band = dsm.band(0)
    empty = dsm_band == np.float32(NODATA)
    chm = np.maximum(dsm_band - dtm_filled, 0.0).astype(np.float32)
    chm = np.where(empty, np.float32(NODATA), chm)
    out = dsm.with_values(chm, nodata=NODATA)
    out.meta["product"] = "chm"
    out.meta["cell_size"] = cell_size
    return out


def sample_mean_height(chm: RasterGrid, polygon, min_samples: int = 5) -> float:
    """Mean CHM value over cells whose centers fall inside the crown ring.

    Raises InsufficientCoverageError when fewer than ``min_samples`` valid
    cells are covered; such crowns are excluded from allometry training.
    """
    ring = getattr(polygon, "ring", polygon)
    from .geometry import raster_cells_in_ring

    rows, cols = raster_cells_in_ring(chm.geo_transform, chm.width, chm.height,
                                      np.asarray(ring, dtype=np.float64))
    if rows.size == 0:
        raise InsufficientCoverageError(
            "polygon does not cover any CHM cell centers")
    samples = chm.band(0)[rows, cols].astype(np.float64)
    if chm.nodata is not None:
        samples = samples[samples != np.float64(np.float32(chm.nodata))]
    if samples.size < min_samples:
        raise InsufficientCoverageError(
            f"only {samples.size} valid CHM cells under polygon, "
            f"need {min_samples}")
    return float(samples.mean())
