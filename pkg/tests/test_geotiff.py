import struct
import zlib

import numpy as np
import pytest

from treecarbon.errors import (GeoreferenceError, ParseError,
                               UnsupportedFormatError, ValidationError)
from treecarbon.geotiff import read_geotiff, read_multispectral, write_geotiff
from treecarbon.raster import GeoTransform

from conftest import make_grid, make_image


def build_tiff(width, height, data_bytes, *, bits=8, sample_format=1,
               bands=1, compression=1, planar=1, rows_per_strip=None,
               pixel_scale=(0.6, 0.6), tiepoint=(0, 0, 0, 0.0, 10.0, 0.0),
               epsg=32618, extra_tags=(), omit_geo=False, nodata=None):
    """Minimal stripped little-endian TIFF, written independently of the
    production writer so reader tests have a second opinion on the format."""
    rows_per_strip = rows_per_strip or height
    strips = []
    bpp = bits // 8
    row_bytes = width * bpp * (bands if planar == 1 else 1)
    plane_rows = height * (bands if planar == 2 else 1)
    for start in range(0, plane_rows, rows_per_strip):
        n = min(rows_per_strip, plane_rows - start)
        chunk = data_bytes[start * row_bytes:(start + n) * row_bytes]
        strips.append(zlib.compress(chunk) if compression == 8 else chunk)

    entries = []  # (tag, type, count, values)
    entries.append((256, 4, 1, [width]))
    entries.append((257, 4, 1, [height]))
    entries.append((258, 3, bands, [bits] * bands))
    entries.append((259, 3, 1, [compression]))
    entries.append((262, 3, 1, [1]))
    entries.append((277, 3, 1, [bands]))
    entries.append((278, 4, 1, [rows_per_strip]))
    entries.append((284, 3, 1, [planar]))
    entries.append((339, 3, bands, [sample_format] * bands))
    if not omit_geo:
        entries.append((33550, 12, 3, [pixel_scale[0], pixel_scale[1], 0.0]))
        entries.append((33922, 12, 6, list(tiepoint)))
        geokeys = [1, 1, 0, 2, 1024, 0, 1, 1, 3072, 0, 1, epsg]
        entries.append((34735, 3, len(geokeys), geokeys))
    if nodata is not None:
        text = repr(float(nodata)).encode("ascii") + b"\0"
        entries.append((42113, 2, len(text), text))
    entries.extend(extra_tags)
    entries.append((273, 4, len(strips), None))  # offsets patched later
    entries.append((279, 4, len(strips), [len(s) for s in strips]))
    entries.sort(key=lambda e: e[0])

    type_size = {1: 1, 2: 1, 3: 2, 4: 4, 12: 8}
    pack_code = {1: "B", 3: "H", 4: "I", 12: "d"}

    header = struct.pack("<2sHI", b"II", 42, 8)
    ifd_size = 2 + 12 * len(entries) + 4
    data_area = bytearray()
    data_base = 8 + ifd_size
    packed = []
    strip_offsets_slot = None
    for tag, ftype, count, values in entries:
        if ftype == 2:
            payload = values if isinstance(values, bytes) else bytes(values)
        else:
            payload = struct.pack(f"<{count}{pack_code[ftype]}",
                                  *(values or [0] * count))
        if len(payload) <= 4:
            packed.append((tag, ftype, count, payload.ljust(4, b"\0"), tag == 273))
        else:
            pos = data_base + len(data_area)
            if tag == 273:
                strip_offsets_slot = pos
            data_area.extend(payload)
            packed.append((tag, ftype, count, struct.pack("<I", pos), False))

    strip_base = data_base + len(data_area)
    offsets = []
    pos = strip_base
    for s in strips:
        offsets.append(pos)
        pos += len(s)
    if strip_offsets_slot is not None:
        payload = struct.pack(f"<{len(offsets)}I", *offsets)
        data_area[strip_offsets_slot - data_base:
                  strip_offsets_slot - data_base + len(payload)] = payload

    out = bytearray(header)
    out += struct.pack("<H", len(packed))
    for tag, ftype, count, value4, is_inline_strip in packed:
        if is_inline_strip:
            value4 = struct.pack("<I", offsets[0])
        out += struct.pack("<HHI", tag, ftype, count) + value4
    out += struct.pack("<I", 0)
    out += data_area
    for s in strips:
        out += s
    return bytes(out)


class TestReadHandBuilt:
    def test_uint8_identity_ingest(self, tmp_path):
        path = tmp_path / "u8.tif"
        path.write_bytes(build_tiff(2, 2, bytes([0, 1, 2, 3])))
        grid = read_geotiff(path)
        assert (grid.width, grid.height, grid.bands) == (2, 2, 1)
        assert grid.values.dtype == np.float32
        assert grid.values.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]
        assert grid.geo_transform == GeoTransform(0.0, 10.0, 0.6, 0.6)
        assert grid.crs_id == 32618

    def test_uint16_deflate_multistrip(self, tmp_path):
        vals = np.arange(24, dtype="<u2")
        path = tmp_path / "u16.tif"
        path.write_bytes(build_tiff(4, 6, vals.tobytes(), bits=16,
                                    compression=8, rows_per_strip=2))
        grid = read_geotiff(path)
        assert grid.values.ravel().tolist() == vals.astype(float).tolist()

    def test_float32_planar_two_band(self, tmp_path):
        band0 = np.arange(6, dtype="<f4")
        band1 = band0 * 10
        payload = band0.tobytes() + band1.tobytes()
        path = tmp_path / "planar.tif"
        path.write_bytes(build_tiff(3, 2, payload, bits=32, sample_format=3,
                                    bands=2, planar=2))
        grid = read_geotiff(path)
        assert np.array_equal(grid.band(0).ravel(), band0)
        assert np.array_equal(grid.band(1).ravel(), band1)

    def test_chunky_interleave(self, tmp_path):
        # pixel-interleaved RG: (r0,g0,r1,g1,...)
        inter = np.asarray([1, 10, 2, 20, 3, 30, 4, 40], dtype=np.uint8)
        path = tmp_path / "chunky.tif"
        path.write_bytes(build_tiff(2, 2, inter.tobytes(), bands=2))
        grid = read_geotiff(path)
        assert grid.band(0).ravel().tolist() == [1, 2, 3, 4]
        assert grid.band(1).ravel().tolist() == [10, 20, 30, 40]

    def test_nodata_tag(self, tmp_path):
        path = tmp_path / "nd.tif"
        path.write_bytes(build_tiff(2, 1, bytes([7, 9]), nodata=-9999.0))
        assert read_geotiff(path).nodata == -9999.0


class TestReadErrors:
    def test_unsupported_compression_names_tag(self, tmp_path):
        path = tmp_path / "lzw.tif"
        path.write_bytes(build_tiff(2, 1, bytes([0, 1]), compression=5))
        with pytest.raises(UnsupportedFormatError) as err:
            read_geotiff(path)
        assert "Compression=5" in str(err.value)

    def test_unsupported_sample_type_names_tag(self, tmp_path):
        data = np.zeros(2, dtype="<f8").tobytes()
        path = tmp_path / "f64.tif"
        path.write_bytes(build_tiff(2, 1, data, bits=64, sample_format=3))
        with pytest.raises(UnsupportedFormatError) as err:
            read_geotiff(path)
        assert "BitsPerSample=64" in str(err.value)

    def test_missing_georeference(self, tmp_path):
        path = tmp_path / "nogeo.tif"
        path.write_bytes(build_tiff(2, 1, bytes([0, 1]), omit_geo=True))
        with pytest.raises(GeoreferenceError):
            read_geotiff(path)

    def test_truncated_mid_strip_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.tif"
        full = build_tiff(64, 64, bytes(range(256)) * 16)
        path.write_bytes(full[:len(full) - 1000])
        with pytest.raises(ParseError) as err:
            read_geotiff(path)
        assert err.value.offset is not None

    def test_not_a_tiff(self, tmp_path):
        path = tmp_path / "junk.tif"
        path.write_bytes(b"this is not a tiff at all")
        with pytest.raises(ParseError):
            read_geotiff(path)

    def test_bigtiff_rejected(self, tmp_path):
        path = tmp_path / "big.tif"
        path.write_bytes(struct.pack("<2sHI", b"II", 43, 8) + b"\0" * 32)
        with pytest.raises(UnsupportedFormatError):
            read_geotiff(path)


class TestWriteReadRoundTrip:
    @pytest.mark.parametrize("bands,shape", [(1, (5, 7)), (4, (300, 260))])
    def test_round_trip_exact(self, tmp_path, bands, shape):
        rng = np.random.default_rng(bands)
        grid = make_grid(rng.random((bands, *shape)).astype(np.float32),
                         pixel_size=0.6)
        path = tmp_path / "rt.tif"
        write_geotiff(grid, path)
        assert read_geotiff(path) == grid

    def test_nodata_preserved(self, tmp_path):
        grid = make_grid(np.zeros((2, 2), dtype=np.float32), nodata=-9999.0)
        path = tmp_path / "nd.tif"
        write_geotiff(grid, path)
        assert read_geotiff(path).nodata == -9999.0

    def test_geographic_crs_round_trip(self, tmp_path):
        grid = make_grid(np.zeros((2, 2), dtype=np.float32), crs=4326)
        path = tmp_path / "geo.tif"
        write_geotiff(grid, path)
        assert read_geotiff(path).crs_id == 4326

    def test_deterministic_bytes(self, tmp_path):
        grid = make_grid(np.arange(12, dtype=np.float32).reshape(3, 4))
        a, b = tmp_path / "a.tif", tmp_path / "b.tif"
        write_geotiff(grid, a)
        write_geotiff(grid, b)
        assert a.read_bytes() == b.read_bytes()

    def test_unwritable_path(self, tmp_path):
        grid = make_grid(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(OSError):
            write_geotiff(grid, tmp_path / "no" / "such" / "dir.tif")

    def test_zero_band_grid_rejected_before_write(self):
        with pytest.raises(ValidationError):
            make_grid(np.zeros((0, 2, 2), dtype=np.float32))


class TestMultispectral:
    def test_uint8_rescaled_to_unit(self, tmp_path):
        data = np.tile(np.asarray([[0, 51], [102, 255]], dtype=np.uint8), (4, 1, 1))
        interleaved = np.moveaxis(data, 0, 2).tobytes()
        path = tmp_path / "ms.tif"
        path.write_bytes(build_tiff(2, 2, interleaved, bands=4))
        img = read_multispectral(path)
        assert img.value_range == (0.0, 1.0)
        assert img.band(0).ravel().tolist() == pytest.approx(
            [0.0, 51 / 255, 102 / 255, 1.0])

    def test_float_passthrough(self, tmp_path):
        img = make_image([[0.2]], [[0.3]], [[0.4]], [[0.6]])
        path = tmp_path / "f.tif"
        write_geotiff(img, path)
        back = read_multispectral(path)
        assert np.array_equal(back.values, img.values)

    def test_wrong_band_count(self, tmp_path):
        grid = make_grid(np.zeros((2, 3, 3), dtype=np.float32))
        path = tmp_path / "two.tif"
        write_geotiff(grid, path)
        with pytest.raises(ValidationError):
            read_multispectral(path)


class TestExternalReader:
    def test_third_party_reader_agrees(self, tmp_path):
        tifffile = pytest.importorskip("tifffile")
        rng = np.random.default_rng(42)
        vals = rng.random((4, 40, 30)).astype(np.float32)
        grid = make_grid(vals, pixel_size=0.6, nodata=-9999.0)
        path = tmp_path / "ext.tif"
        write_geotiff(grid, path)
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            assert page.is_tiled
            assert np.array_equal(np.moveaxis(page.asarray(), 2, 0), vals)
            assert 33550 in page.tags and 33922 in page.tags
            assert float(page.tags[42113].value) == -9999.0
