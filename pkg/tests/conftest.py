import numpy as np
import pytest

from treecarbon.raster import GeoTransform, MultiSpectralImage, RasterGrid
from treecarbon.species import SpeciesEntry, SpeciesTable

# wood densities from the four-species street-tree data set
TABLE_ROWS = [
    (0, "London plane tree", 560.0),
    (1, "Honeylocust", 755.0),
    (2, "Callery pear", 690.0),
    (3, "Pin oak", 705.0),
]


@pytest.fixture
def species_table() -> SpeciesTable:
    return SpeciesTable([SpeciesEntry(*row) for row in TABLE_ROWS])


@pytest.fixture
def species_csv(tmp_path):
    path = tmp_path / "species.csv"
    lines = ["label,name,rho"]
    lines += [f"{label},{name},{rho}" for label, name, rho in TABLE_ROWS]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_grid(values, pixel_size=0.6, origin=(0.0, None), crs=32618,
              nodata=None) -> RasterGrid:
    """Grid from a (h, w) or (bands, h, w) array, top-left origin by default."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None, :, :]
    bands, height, width = values.shape
    oy = origin[1] if origin[1] is not None else height * pixel_size
    gt = GeoTransform(origin[0], oy, pixel_size, pixel_size)
    return RasterGrid(width, height, bands, values, gt, crs, nodata)


def make_image(r, g, b, nir, pixel_size=0.6, nodata=None) -> MultiSpectralImage:
    stack = np.stack([np.asarray(r, dtype=np.float32),
                      np.asarray(g, dtype=np.float32),
                      np.asarray(b, dtype=np.float32),
                      np.asarray(nir, dtype=np.float32)])
    grid = make_grid(stack, pixel_size=pixel_size, nodata=nodata)
    return MultiSpectralImage.from_grid(grid)


def square_ring(min_x, min_y, max_x, max_y) -> np.ndarray:
    return np.asarray([[min_x, min_y], [max_x, min_y],
                       [max_x, max_y], [min_x, max_y]], dtype=np.float64)
