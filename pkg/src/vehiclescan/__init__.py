"""vehiclescan: vehicle detection on 0.5 m multi-band satellite imagery and
the downstream transportation-density analytics."""

__version__ = "0.1.0"

from .geometry import OrientedBox
from .raster import ImageStats, Raster, compute_ndvi, extract_patch, load_raster, save_raster
from .roadmask import RoadClass, RoadMask, RoadNetwork, build_road_mask, classify_highway_tag

__all__ = [
    "OrientedBox",
    "ImageStats",
    "Raster",
    "compute_ndvi",
    "extract_patch",
    "load_raster",
    "save_raster",
    "RoadClass",
    "RoadMask",
    "RoadNetwork",
    "build_road_mask",
    "classify_highway_tag",
    "__version__",
]
