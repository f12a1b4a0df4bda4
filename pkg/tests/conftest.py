import numpy as np
import pytest

from vehiclescan.raster import Raster


def make_raster(bands, pixel_size=0.5, origin=(0.0, None)):
    """Raster from a (4, H, W) array with a north-up geotransform."""
    bands = np.asarray(bands, dtype=np.float32)
    origin_x, origin_y = origin
    if origin_y is None:
        origin_y = bands.shape[1] * pixel_size
    return Raster(bands=bands, origin_x=origin_x, origin_y=origin_y, pixel_size=pixel_size)


def constant_raster(value, h=32, w=32, pixel_size=0.5):
    return make_raster(np.full((4, h, w), value, dtype=np.float32), pixel_size=pixel_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
