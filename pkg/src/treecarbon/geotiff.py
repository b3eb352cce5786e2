"""GeoTIFF reading and writing for a deliberately narrow, documented subset.

Read support: classic TIFF (either byte order), stripped or tiled layout,
uncompressed or Deflate, samples of uint8 / uint16 / float32, chunky or
planar interleaving, north-up georeferencing via ModelPixelScale +
ModelTiepoint (or a rotation-free ModelTransformation), EPSG code from the
GeoKey directory, optional GDAL-style nodata.  Everything else fails loudly
with the offending tag named rather than guessing.

Write profile: little-endian classic TIFF, 256x256 tiles, Deflate, float32,
chunky interleave, GeoKey directory with the EPSG code, nodata tag when set.
Output carries no timestamps, so identical grids produce identical bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    GeoreferenceError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)
from .raster import GeoTransform, MultiSpectralImage, RasterGrid

# TIFF tags used by the subset
IMAGE_WIDTH = 256
IMAGE_LENGTH = 257
BITS_PER_SAMPLE = 258
COMPRESSION = 259
PHOTOMETRIC = 262
STRIP_OFFSETS = 273
SAMPLES_PER_PIXEL = 277
ROWS_PER_STRIP = 278
STRIP_BYTE_COUNTS = 279
PLANAR_CONFIG = 284
PREDICTOR = 317
TILE_WIDTH = 322
TILE_LENGTH = 323
TILE_OFFSETS = 324
TILE_BYTE_COUNTS = 325
EXTRA_SAMPLES = 338
SAMPLE_FORMAT = 339
MODEL_PIXEL_SCALE = 33550
MODEL_TIEPOINT = 33922
MODEL_TRANSFORMATION = 34264
GEO_KEY_DIRECTORY = 34735
GEO_DOUBLE_PARAMS = 34736
GEO_ASCII_PARAMS = 34737
GDAL_NODATA = 42113

GT_MODEL_TYPE = 1024
GT_RASTER_TYPE = 1025
GEOGRAPHIC_TYPE = 2048
PROJECTED_CS_TYPE = 3072

_COMPRESSION_NAMES = {
    1: "none", 5: "LZW", 6: "old JPEG", 7: "JPEG", 8: "Deflate",
    32773: "PackBits", 32946: "Deflate(legacy)", 34712: "JPEG2000",
}

# field type -> (struct code, byte size); rationals handled separately
_TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 6: 1, 7: 1, 8: 2, 9: 4, 10: 8,
               11: 4, 12: 8}

TILE_SIZE = 256


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        if len(data) < 8:
            raise ParseError(f"{path}: file shorter than TIFF header", offset=len(data))
        order = data[:2]
        if order == b"II":
            self.bo = "<"
        elif order == b"MM":
            self.bo = ">"
        else:
            raise ParseError(f"{path}: not a TIFF file (bad byte-order mark)", offset=0)
        magic = self._u16(2)
        if magic == 43:
            raise UnsupportedFormatError(f"{path}: BigTIFF is not supported")
        if magic != 42:
            raise ParseError(f"{path}: bad TIFF magic {magic}", offset=2)

    def _need(self, offset: int, nbytes: int):
        if offset + nbytes > len(self.data):
            raise ParseError(
                f"{self.path}: truncated (need {nbytes} bytes)", offset=offset)

    def _u16(self, offset: int) -> int:
        self._need(offset, 2)
        return struct.unpack_from(self.bo + "H", self.data, offset)[0]

    def _u32(self, offset: int) -> int:
        self._need(offset, 4)
        return struct.unpack_from(self.bo + "I", self.data, offset)[0]

    def read_ifd(self) -> dict[int, list]:
        ifd_off = self._u32(4)
        n = self._u16(ifd_off)
        tags: dict[int, list] = {}
        for i in range(n):
            base = ifd_off + 2 + 12 * i
            self._need(base, 12)
            tag, ftype = struct.unpack_from(self.bo + "HH", self.data, base)
            count = self._u32(base + 4)
            size = _TYPE_SIZES.get(ftype)
            if size is None:
                continue  # unknown field type: tolerated, skipped
            total = size * count
            off = base + 8 if total <= 4 else self._u32(base + 8)
            self._need(off, total)
            tags[tag] = self._decode(ftype, count, off)
        return tags

    def _decode(self, ftype: int, count: int, off: int) -> list:
        if ftype == 2:  # ASCII
            raw = self.data[off:off + count]
            return [raw.split(b"\0")[0].decode("ascii", "replace")]
        if ftype in (5, 10):  # rationals
            vals = []
            for i in range(count):
                num = self._u32(off + 8 * i)
                den = self._u32(off + 8 * i + 4)
                vals.append(num / den if den else 0.0)
            return vals
        code = {1: "B", 3: "H", 4: "I", 6: "b", 7: "B", 8: "h", 9: "i",
                11: "f", 12: "d"}[ftype]
        return list(struct.unpack_from(self.bo + str(count) + code, self.data, off))


def _single(tags: dict, tag: int, default=None):
    vals = tags.get(tag)
    if vals is None:
        return default
    return vals[0]


def _geotransform(tags: dict, path: str) -> GeoTransform:
    if MODEL_TRANSFORMATION in tags:
        m = tags[MODEL_TRANSFORMATION]
        if len(m) != 16:
            raise GeoreferenceError(f"{path}: ModelTransformation must hold 16 doubles")
        if m[1] != 0 or m[4] != 0:
            raise GeoreferenceError(
                f"{path}: rotated rasters are not supported (ModelTransformation "
                f"has nonzero rotation terms)")
        sx, sy = m[0], -m[5]
        ox, oy = m[3], m[7]
    else:
        scale = tags.get(MODEL_PIXEL_SCALE)
        tie = tags.get(MODEL_TIEPOINT)
        if scale is None or tie is None:
            raise GeoreferenceError(
                f"{path}: missing georeferencing tags (need ModelPixelScale + "
                f"ModelTiepoint or ModelTransformation)")
        if len(scale) < 2 or len(tie) < 6:
            raise GeoreferenceError(f"{path}: malformed georeferencing tag lengths")
        sx, sy = scale[0], scale[1]
        # tiepoint maps raster (i, j) to model (x, y)
        i, j, _, x, y = tie[0], tie[1], tie[2], tie[3], tie[4]
        ox = x - i * sx
        oy = y + j * sy
    if sx <= 0 or sy <= 0:
        raise GeoreferenceError(f"{path}: non-positive pixel scale ({sx}, {sy})")
    return GeoTransform(ox, oy, sx, sy)


def _epsg(tags: dict, path: str) -> int:
    keys = tags.get(GEO_KEY_DIRECTORY)
    if keys is None or len(keys) < 4:
        raise GeoreferenceError(f"{path}: missing GeoKey directory (no CRS)")
    nkeys = keys[3]
    code = None
    for k in range(nkeys):
        base = 4 + 4 * k
        if base + 4 > len(keys):
            raise GeoreferenceError(f"{path}: GeoKey directory truncated")
        key_id, location, count, value = keys[base:base + 4]
        if key_id in (PROJECTED_CS_TYPE, GEOGRAPHIC_TYPE) and location == 0:
            code = value
            if key_id == PROJECTED_CS_TYPE:
                break  # projected code wins if both present
    if code is None:
        raise GeoreferenceError(f"{path}: GeoKey directory carries no EPSG code")
    return int(code)


def _sample_dtype(tags: dict, path: str) -> np.dtype:
    spp = _single(tags, SAMPLES_PER_PIXEL, 1)
    bits = tags.get(BITS_PER_SAMPLE, [1])
    fmts = tags.get(SAMPLE_FORMAT, [1] * spp)
    if len(set(bits)) != 1 or len(set(fmts)) != 1:
        raise UnsupportedFormatError(f"{path}: mixed per-band sample types")
    bit, fmt = bits[0], fmts[0]
    if fmt == 1 and bit == 8:
        return np.dtype("u1")
    if fmt == 1 and bit == 16:
        return np.dtype("u2")
    if fmt == 3 and bit == 32:
        return np.dtype("f4")
    raise UnsupportedFormatError(
        f"{path}: unsupported sample type (BitsPerSample={bit}, "
        f"SampleFormat={fmt}); supported: uint8, uint16, float32")


def _decompress(chunk: bytes, compression: int, expected: int, path: str,
                offset: int) -> bytes:
    if compression == 1:
        out = chunk
    else:
        try:
            out = zlib.decompress(chunk)
        except zlib.error as exc:
            raise ParseError(f"{path}: bad Deflate stream ({exc})",
                             offset=offset) from None
    if len(out) < expected:
        raise ParseError(
            f"{path}: chunk shorter than expected ({len(out)} < {expected})",
            offset=offset)
    return out[:expected]


def read_geotiff(path) -> RasterGrid:
    """Read a GeoTIFF into a float32 RasterGrid.

    Values are promoted to float32 without rescaling; ``meta['source_dtype']``
    records the on-disk type so radiometric rescaling can happen downstream.
    """
    path = str(path)
    data = Path(path).read_bytes()
    rd = _Reader(data, path)
    tags = rd.read_ifd()

    width = _single(tags, IMAGE_WIDTH)
    height = _single(tags, IMAGE_LENGTH)
    if not width or not height:
        raise ParseError(f"{path}: missing image dimensions", offset=8)
    bands = _single(tags, SAMPLES_PER_PIXEL, 1)
    compression = _single(tags, COMPRESSION, 1)
    if compression not in (1, 8, 32946):
        name = _COMPRESSION_NAMES.get(compression, "unknown")
        raise UnsupportedFormatError(
            f"{path}: Compression={compression} ({name}) not supported; "
            f"only none and Deflate are")
    predictor = _single(tags, PREDICTOR, 1)
    if predictor != 1:
        raise UnsupportedFormatError(
            f"{path}: Predictor={predictor} not supported")
    planar = _single(tags, PLANAR_CONFIG, 1)
    if planar not in (1, 2):
        raise UnsupportedFormatError(f"{path}: PlanarConfiguration={planar}")
    dtype = _sample_dtype(tags, path).newbyteorder(rd.bo)
    itemsize = dtype.itemsize

    out = np.empty((bands, height, width), dtype=np.float32)
    if TILE_OFFSETS in tags:
        _read_tiled(rd, tags, out, dtype, planar, compression, path)
    elif STRIP_OFFSETS in tags:
        _read_stripped(rd, tags, out, dtype, planar, compression, path)
    else:
        raise ParseError(f"{path}: neither strip nor tile offsets present", offset=8)

    gt = _geotransform(tags, path)
    crs = _epsg(tags, path)
    nodata = None
    nd_text = _single(tags, GDAL_NODATA)
    if nd_text is not None:
        try:
            nodata = float(nd_text.strip())
        except ValueError:
            raise ParseError(f"{path}: unparseable nodata tag {nd_text!r}") from None
    grid = RasterGrid(width, height, bands, out, gt, crs, nodata)
    grid.meta["source_dtype"] = str(np.dtype(dtype.str[1:]))
    return grid


def _read_stripped(rd, tags, out, dtype, planar, compression, path):
    bands, height, width = out.shape
    offsets = tags[STRIP_OFFSETS]
    counts = tags.get(STRIP_BYTE_COUNTS)
    if counts is None or len(counts) != len(offsets):
        raise ParseError(f"{path}: StripByteCounts missing or inconsistent")
    rps = _single(tags, ROWS_PER_STRIP, height)
    strips_per_band = -(-height // rps)
    expected_strips = strips_per_band * (bands if planar == 2 else 1)
    if len(offsets) != expected_strips:
        raise ParseError(
            f"{path}: {len(offsets)} strips, expected {expected_strips}")
    for s, (off, cnt) in enumerate(zip(offsets, counts)):
        rd._need(off, cnt)
        band = s // strips_per_band if planar == 2 else None
        srow = (s % strips_per_band) * rps
        nrows = min(rps, height - srow)
        per_px = 1 if planar == 2 else bands
        raw = _decompress(rd.data[off:off + cnt], compression,
                          nrows * width * per_px * dtype.itemsize, path, off)
        arr = np.frombuffer(raw, dtype=dtype, count=nrows * width * per_px)
        if planar == 2:
            out[band, srow:srow + nrows] = arr.reshape(nrows, width)
        else:
            arr = arr.reshape(nrows, width, bands)
            out[:, srow:srow + nrows] = np.moveaxis(arr, 2, 0)


def _read_tiled(rd, tags, out, dtype, planar, compression, path):
    bands, height, width = out.shape
    tw = _single(tags, TILE_WIDTH)
    th = _single(tags, TILE_LENGTH)
    if not tw or not th:
        raise ParseError(f"{path}: tile dimensions missing")
    offsets = tags[TILE_OFFSETS]
    counts = tags.get(TILE_BYTE_COUNTS)
    if counts is None or len(counts) != len(offsets):
        raise ParseError(f"{path}: TileByteCounts missing or inconsistent")
    across = -(-width // tw)
    down = -(-height // th)
    per_band = across * down
    expected = per_band * (bands if planar == 2 else 1)
    if len(offsets) != expected:
        raise ParseError(f"{path}: {len(offsets)} tiles, expected {expected}")
    per_px = 1 if planar == 2 else bands
    for t, (off, cnt) in enumerate(zip(offsets, counts)):
        rd._need(off, cnt)
        band = t // per_band if planar == 2 else None
        idx = t % per_band
        trow, tcol = divmod(idx, across)
        r0, c0 = trow * th, tcol * tw
        nrows = min(th, height - r0)
        ncols = min(tw, width - c0)
        raw = _decompress(rd.data[off:off + cnt], compression,
                          th * tw * per_px * dtype.itemsize, path, off)
        arr = np.frombuffer(raw, dtype=dtype, count=th * tw * per_px)
        if planar == 2:
            tile = arr.reshape(th, tw)
            out[band, r0:r0 + nrows, c0:c0 + ncols] = tile[:nrows, :ncols]
        else:
            tile = arr.reshape(th, tw, bands)
            out[:, r0:r0 + nrows, c0:c0 + ncols] = \
                np.moveaxis(tile[:nrows, :ncols], 2, 0)


def read_multispectral(path) -> MultiSpectralImage:
    """Read 4-band imagery and rescale integer data to [0, 1].

    uint8 divides by 255, uint16 by 65535; float32 input is taken as already
    normalized.  When integer nodata is rescaled the marker moves to -9999 so
    it cannot collide with valid reflectance values.
    """
    grid = read_geotiff(path)
    if grid.bands != 4:
        raise ValidationError(
            f"{path}: multispectral imagery needs 4 bands, found {grid.bands}")
    src = grid.meta.get("source_dtype", "float32")
    values = grid.values
    nodata = grid.nodata
    if src in ("uint8", "uint16"):
        scale = 255.0 if src == "uint8" else 65535.0
        invalid = None
        if nodata is not None:
            invalid = ~grid.valid_mask()
            nodata = -9999.0
        values = (values / np.float32(scale)).astype(np.float32)
        if invalid is not None:
            values = np.where(invalid, np.float32(nodata), values)
    img = MultiSpectralImage(grid.width, grid.height, 4, values,
                             grid.geo_transform, grid.crs_id, nodata,
                             dict(grid.meta), (0.0, 1.0))
    return img


def write_geotiff(grid: RasterGrid, path) -> None:
    """Write a tiled, Deflate-compressed, float32 GeoTIFF."""
    if grid.bands < 1:
        raise ValidationError("grid must carry at least one band")
    values = np.ascontiguousarray(grid.values, dtype="<f4")
    width, height, bands = grid.width, grid.height, grid.bands
    tw = th = TILE_SIZE
    across = -(-width // tw)
    down = -(-height // th)

    tiles = []
    for trow in range(down):
        for tcol in range(across):
            r0, c0 = trow * th, tcol * tw
            tile = np.zeros((th, tw, bands), dtype="<f4")
            nrows = min(th, height - r0)
            ncols = min(tw, width - c0)
            block = np.moveaxis(values[:, r0:r0 + nrows, c0:c0 + ncols], 0, 2)
            tile[:nrows, :ncols] = block
            tiles.append(zlib.compress(tile.tobytes(), 6))

    gt = grid.geo_transform
    geotiff_geokeys = _geokey_directory(grid.crs_id)

    entries = [
        (IMAGE_WIDTH, 4, [width]),
        (IMAGE_LENGTH, 4, [height]),
        (BITS_PER_SAMPLE, 3, [32] * bands),
        (COMPRESSION, 3, [8]),
        (PHOTOMETRIC, 3, [1]),
        (SAMPLES_PER_PIXEL, 3, [bands]),
        (PLANAR_CONFIG, 3, [1]),
        (TILE_WIDTH, 3, [tw]),
        (TILE_LENGTH, 3, [th]),
        (TILE_OFFSETS, 4, [0] * len(tiles)),  # patched below
        (TILE_BYTE_COUNTS, 4, [len(t) for t in tiles]),
        (SAMPLE_FORMAT, 3, [3] * bands),
        (MODEL_PIXEL_SCALE, 12, [gt.pixel_size_x, gt.pixel_size_y, 0.0]),
        (MODEL_TIEPOINT, 12, [0.0, 0.0, 0.0, gt.origin_x, gt.origin_y, 0.0]),
        (GEO_KEY_DIRECTORY, 3, geotiff_geokeys),
    ]
    if bands > 1:
        entries.append((EXTRA_SAMPLES, 3, [0] * (bands - 1)))
    if grid.nodata is not None:
        nd = grid.nodata
        text = "nan" if isinstance(nd, float) and np.isnan(nd) else repr(float(nd))
        entries.append((GDAL_NODATA, 2, [text]))
    entries.sort(key=lambda e: e[0])

    header = struct.pack("<2sHI", b"II", 42, 8)
    ifd_size = 2 + 12 * len(entries) + 4
    data_area = bytearray()
    data_base = 8 + ifd_size

    packed_entries = []
    tile_offsets_pos = None
    for tag, ftype, vals in entries:
        payload = _pack_values(ftype, vals)
        count = len(vals[0]) + 1 if ftype == 2 else len(vals)
        if len(payload) <= 4:
            inline = payload + b"\0" * (4 - len(payload))
            packed_entries.append((tag, ftype, count, inline, None))
        else:
            pos = data_base + len(data_area)
            if tag == TILE_OFFSETS:
                tile_offsets_pos = pos
            data_area.extend(payload)
            if len(data_area) % 2:
                data_area.append(0)
            packed_entries.append((tag, ftype, count, struct.pack("<I", pos), None))

    tile_base = data_base + len(data_area)
    offsets = []
    pos = tile_base
    for t in tiles:
        offsets.append(pos)
        pos += len(t)
        if pos % 2:
            pos += 1
    if tile_offsets_pos is None:
        # single tile whose offset fit inline
        packed_entries = [
            (tag, ftype, count, struct.pack("<I", offsets[0]) if tag == TILE_OFFSETS
             else inline, None)
            for tag, ftype, count, inline, _ in packed_entries]
    else:
        off_payload = struct.pack(f"<{len(offsets)}I", *offsets)
        data_area[tile_offsets_pos - data_base:
                  tile_offsets_pos - data_base + len(off_payload)] = off_payload

    out = bytearray()
    out += header
    out += struct.pack("<H", len(packed_entries))
    for tag, ftype, count, value4, _ in packed_entries:
        out += struct.pack("<HHI", tag, ftype, count) + value4
    out += struct.pack("<I", 0)  # no next IFD
    out += data_area
    for t in tiles:
        out += t
        if len(out) % 2:
            out.append(0)

    with open(path, "wb") as fh:
        fh.write(out)


def _pack_values(ftype: int, vals) -> bytes:
    if ftype == 2:
        return vals[0].encode("ascii") + b"\0"
    if ftype == 3:
        return struct.pack(f"<{len(vals)}H", *vals)
    if ftype == 4:
        return struct.pack(f"<{len(vals)}I", *vals)
    if ftype == 12:
        return struct.pack(f"<{len(vals)}d", *vals)
    raise ValueError(f"unhandled field type {ftype}")


def _geokey_directory(crs_id: int) -> list[int]:
    # EPSG 4000-4999 are geographic systems; everything else projected
    geographic = 4000 <= crs_id < 5000
    keys = [
        (GT_MODEL_TYPE, 0, 1, 2 if geographic else 1),
        (GT_RASTER_TYPE, 0, 1, 1),  # PixelIsArea
        (GEOGRAPHIC_TYPE if geographic else PROJECTED_CS_TYPE, 0, 1, crs_id),
    ]
    directory = [1, 1, 0, len(keys)]
    for k in keys:
        directory.extend(k)
    return directory
