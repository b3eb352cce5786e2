import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treecarbon.errors import (IncompleteCoverageError, ParameterError,
                               ParseError, ValidationError)
from treecarbon.raster import (GeoTransform, MultiSpectralImage, RasterGrid,
                               compute_ndvi, merge_tiles, read_cgrid,
                               tile_grid, write_cgrid)

from conftest import make_grid, make_image


class TestRasterGrid:
    def test_value_count_invariant(self):
        with pytest.raises(ValidationError):
            RasterGrid(2, 2, 1, np.zeros(5, dtype=np.float32),
                       GeoTransform(0, 1.2, 0.6, 0.6))

    def test_zero_bands_rejected(self):
        with pytest.raises(ValidationError):
            RasterGrid(2, 2, 0, np.zeros(0, dtype=np.float32),
                       GeoTransform(0, 1.2, 0.6, 0.6))

    def test_pixel_size_must_be_positive(self):
        with pytest.raises(ParameterError):
            GeoTransform(0, 0, 0.0, 0.6)

    def test_values_frozen(self):
        grid = make_grid(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            grid.values[0, 0, 0] = 1.0

    def test_pixel_map_bijection(self):
        gt = GeoTransform(100.0, 500.0, 0.6, 0.6)
        cols = np.arange(50)
        rows = np.arange(40)
        cc, rr = np.meshgrid(cols, rows)
        x, y = gt.pixel_center(cc, rr)
        back_c, back_r = gt.map_to_pixel(x, y)
        assert np.array_equal(back_c, cc)
        assert np.array_equal(back_r, rr)


class TestNdvi:
    def test_direct_arithmetic(self):
        img = make_image([[0.2]], [[0.1]], [[0.1]], [[0.6]])
        out = compute_ndvi(img)
        assert out.band(0)[0, 0] == pytest.approx(0.5)

    def test_equal_bands_give_zero(self):
        img = make_image([[0.3]], [[0.1]], [[0.1]], [[0.3]])
        assert compute_ndvi(img).band(0)[0, 0] == 0.0

    def test_zero_denominator_maps_to_zero(self):
        img = make_image([[0.0]], [[0.5]], [[0.5]], [[0.0]])
        assert compute_ndvi(img).band(0)[0, 0] == 0.0

    def test_output_range(self):
        rng = np.random.default_rng(7)
        shape = (16, 16)
        img = make_image(rng.random(shape), rng.random(shape),
                         rng.random(shape), rng.random(shape))
        vals = compute_ndvi(img).band(0)
        assert (vals >= -1.0).all() and (vals <= 1.0).all()

    def test_nodata_propagates(self):
        r = np.asarray([[0.2, -9999.0]], dtype=np.float32)
        nir = np.asarray([[0.6, 0.6]], dtype=np.float32)
        g = b = np.asarray([[0.1, 0.1]], dtype=np.float32)
        grid = make_grid(np.stack([r, g, b, nir]), nodata=-9999.0)
        img = MultiSpectralImage.from_grid(grid)
        out = compute_ndvi(img)
        assert out.band(0)[0, 0] == pytest.approx(0.5)
        assert out.band(0)[0, 1] == np.float32(-9999.0)

    def test_pixel_local(self):
        # permuting two input pixels permutes exactly those two outputs
        rng = np.random.default_rng(3)
        bands = rng.random((4, 5, 5)).astype(np.float32)
        swapped = bands.copy()
        swapped[:, 0, 0], swapped[:, 3, 4] = (bands[:, 3, 4].copy(),
                                              bands[:, 0, 0].copy())
        a = compute_ndvi(MultiSpectralImage.from_grid(make_grid(bands)))
        b = compute_ndvi(MultiSpectralImage.from_grid(make_grid(swapped)))
        av, bv = a.band(0).copy(), b.band(0).copy()
        assert av[0, 0] == bv[3, 4] and av[3, 4] == bv[0, 0]
        av[0, 0] = av[3, 4] = bv[0, 0] = bv[3, 4] = 0
        assert np.array_equal(av, bv)

    def test_band_count_enforced(self):
        grid = make_grid(np.zeros((3, 2, 2), dtype=np.float32))
        with pytest.raises(ValidationError):
            MultiSpectralImage.from_grid(grid)


def enumerate_core_ownership(tiles, width, height):
    """Oracle: how many tile cores claim each pixel."""
    counts = np.zeros((height, width), dtype=int)
    for t in tiles:
        c0, c1, r0, r1 = t.core
        counts[r0:r1, c0:c1] += 1
    return counts


class TestTiling:
    def test_identity_single_tile(self):
        grid = make_grid(np.arange(100 * 100, dtype=np.float32).reshape(100, 100))
        tiles = tile_grid(grid, 100, 0)
        assert len(tiles) == 1
        assert tiles[0].grid == grid
        assert tiles[0].core == (0, 100, 0, 100)

    def test_60_10_tiling_partitions_100(self):
        # derived by exhaustive pixel-ownership enumeration
        grid = make_grid(np.zeros((100, 100), dtype=np.float32))
        tiles = tile_grid(grid, 60, 10)
        assert len(tiles) == 4  # 2 x 2
        counts = enumerate_core_ownership(tiles, 100, 100)
        assert (counts == 1).all()
        for t in tiles:
            assert t.grid.width == 60 and t.grid.height == 60

    @pytest.mark.parametrize("size,tile,overlap", [
        (100, 60, 10), (101, 60, 10), (64, 17, 3), (33, 32, 4), (7, 64, 8),
    ])
    def test_cores_partition_always(self, size, tile, overlap):
        grid = make_grid(np.zeros((size, size), dtype=np.float32))
        tiles = tile_grid(grid, tile, overlap)
        counts = enumerate_core_ownership(tiles, size, size)
        assert (counts == 1).all()
        for t in tiles:
            c0, c1, r0, r1 = t.core
            assert t.col_off <= c0 and c1 <= t.col_off + t.grid.width
            assert t.row_off <= r0 and r1 <= t.row_off + t.grid.height

    def test_parameter_error(self):
        grid = make_grid(np.zeros((10, 10), dtype=np.float32))
        with pytest.raises(ParameterError):
            tile_grid(grid, 20, 10)

    def test_merge_inverse(self):
        rng = np.random.default_rng(11)
        grid = make_grid(rng.random((3, 50, 70)).astype(np.float32))
        tiles = tile_grid(grid, 32, 6)
        assert merge_tiles(tiles, (70, 50)) == grid

    def test_merge_order_independent(self):
        rng = np.random.default_rng(12)
        grid = make_grid(rng.random((1, 40, 40)).astype(np.float32))
        tiles = tile_grid(grid, 24, 4)
        merged_fwd = merge_tiles(tiles, (40, 40))
        merged_rev = merge_tiles(tiles[::-1], (40, 40))
        assert merged_fwd == merged_rev == grid

    def test_missing_tile_reported(self):
        grid = make_grid(np.zeros((40, 40), dtype=np.float32))
        tiles = tile_grid(grid, 24, 4)
        with pytest.raises(IncompleteCoverageError) as err:
            merge_tiles(tiles[:-1], (40, 40))
        assert err.value.missing  # names the uncovered area

    def test_per_tile_processing_equals_global(self):
        # NDVI is pixel-local, so tile processing + merge == global processing
        rng = np.random.default_rng(13)
        bands = rng.random((4, 48, 48)).astype(np.float32)
        img = MultiSpectralImage.from_grid(make_grid(bands))
        whole = compute_ndvi(img)
        tiles = tile_grid(img, 20, 4)
        processed = []
        for t in tiles:
            sub = MultiSpectralImage.from_grid(t.grid)
            out = compute_ndvi(sub)
            processed.append(type(t)(out, t.col_off, t.row_off, t.core))
        assert merge_tiles(processed, (48, 48)) == whole


class TestCgrid:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        grid = make_grid(rng.random((2, 7, 9)).astype(np.float32))
        path = tmp_path / "grid.cgrd"
        write_cgrid(grid, path)
        back = read_cgrid(path)
        assert back.width == 9 and back.height == 7 and back.bands == 2
        assert np.array_equal(back.values, grid.values)
        assert back.geo_transform.pixel_size_x == grid.geo_transform.pixel_size_x

    def test_header_layout(self, tmp_path):
        grid = make_grid(np.zeros((1, 1), dtype=np.float32), pixel_size=0.6)
        path = tmp_path / "grid.cgrd"
        write_cgrid(grid, path)
        raw = path.read_bytes()
        assert raw[:4] == b"CGRD"
        assert len(raw) == 24 + 4  # header + one f32

    def test_truncated_payload(self, tmp_path):
        grid = make_grid(np.zeros((4, 4), dtype=np.float32))
        path = tmp_path / "grid.cgrd"
        write_cgrid(grid, path)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(ParseError):
            read_cgrid(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.data())
def test_ndvi_range_property(width, height, data):
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    img = make_image(rng.random((height, width)), rng.random((height, width)),
                     rng.random((height, width)), rng.random((height, width)))
    vals = compute_ndvi(img).band(0)
    assert (vals >= -1.0).all() and (vals <= 1.0).all()
