"""treecarbon: per-tree carbon stock estimation from imagery and LiDAR.

The pipeline masks tree cover with NDVI plus a random forest, splits the
mask into individual crowns with marker-controlled watershed segmentation,
assigns species, calibrates per-species diameter-to-height models against
LiDAR, and turns geometry into biomass and stored carbon per tree.
"""

from .allometry import (AllometricModel, AllometrySet, estimate_height,
                        fit_all_species, fit_allometry)
from .carbon import (CarbonEstimate, CrownSkip, agb, aggregate,
                     carbon_density_raster, carbon_from_agb, estimate_crown,
                     estimate_crowns)
from .crowns import (CrownPolygon, equivalent_diameter, find_markers,
                     polygonize, watershed)
from .errors import TreeCarbonError
from .geotiff import read_geotiff, read_multispectral, write_geotiff
from .learn import (FeatureStack, LabeledPixels, RandomForestModel,
                    RFHyperparams, build_tree_mask, extract_features,
                    load_model, rf_predict, rf_train, save_model)
from .lidar import (PointCloud, build_chm, read_las, rasterize_surface,
                    sample_mean_height, write_las)
from .pipeline import PipelineConfig, run_pipeline
from .raster import (GeoTransform, MultiSpectralImage, RasterGrid,
                     compute_ndvi, merge_tiles, read_cgrid, tile_grid,
                     write_cgrid)
from .species import (SpeciesTable, assign_species_majority, crown_features,
                      load_species_table, rasterize_species, species_train)
from .synth import SyntheticSceneSpec, generate_synthetic_scene

__version__ = "0.1.0"
