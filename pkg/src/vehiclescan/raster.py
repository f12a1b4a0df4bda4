"""Multi-band georeferenced rasters: GeoTIFF I/O, NDVI, rotated patch sampling.

Bands are stored as a (4, H, W) float32 block in B, G, R, NIR order.  The
geotransform is limited to north-up square pixels: ``origin`` is the top-left
corner in CRS meters and y decreases with increasing row index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import tifffile

from .geometry import OrientedBox

BAND_ORDER = ("B", "G", "R", "NIR")

# GeoTIFF tags: pixel scale and tie point
_TAG_SCALE = 33550
_TAG_TIEPOINT = 33922


class RasterError(ValueError):
    """Raised when a raster file or its metadata cannot be used."""


@dataclass(frozen=True)
class Raster:
    bands: np.ndarray  # (4, H, W) float32
    origin_x: float
    origin_y: float
    pixel_size: float
    band_names: tuple = BAND_ORDER

    def __post_init__(self):
        if self.bands.ndim != 3 or self.bands.shape[0] != len(self.band_names):
            raise RasterError(
                f"expected {len(self.band_names)} bands, got shape {self.bands.shape}"
            )
        if self.pixel_size <= 0:
            raise RasterError("pixel_size: must be > 0")

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]

    def band(self, name: str) -> np.ndarray:
        try:
            return self.bands[self.band_names.index(name)]
        except ValueError:
            raise RasterError(f"band {name!r} not present") from None

    def pixel_to_xy(self, row, col):
        """CRS coordinates of a pixel center."""
        x = self.origin_x + (np.asarray(col) + 0.5) * self.pixel_size
        y = self.origin_y - (np.asarray(row) + 0.5) * self.pixel_size
        return x, y

    def xy_to_pixel(self, x, y):
        """Fractional (row, col) of a CRS point."""
        col = (np.asarray(x) - self.origin_x) / self.pixel_size - 0.5
        row = (self.origin_y - np.asarray(y)) / self.pixel_size - 0.5
        return row, col


@dataclass(frozen=True)
class ImageStats:
    """Per-band mean and standard deviation used for patch normalization."""

    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def from_raster(cls, raster: Raster) -> "ImageStats":
        means = raster.bands.reshape(raster.bands.shape[0], -1).mean(axis=1, dtype=np.float64)
        stds = raster.bands.reshape(raster.bands.shape[0], -1).std(axis=1, dtype=np.float64)
        for name, s in zip(raster.band_names, stds):
            if not s > 0:
                raise RasterError(f"band {name}: degenerate (std == 0)")
        return cls(means=means, stds=stds)


def load_raster(path, band_order=BAND_ORDER) -> Raster:
    """Read a >=4-band GeoTIFF with square pixels.

    ``band_order`` names the file's band sequence; planes are reordered into
    the canonical B, G, R, NIR layout.
    """
    try:
        with tifffile.TiffFile(str(path)) as tf:
            arr = tf.asarray()
            page = tf.pages[0]
            scale_tag = page.tags.get(_TAG_SCALE)
            tie_tag = page.tags.get(_TAG_TIEPOINT)
            scale_value = scale_tag.value if scale_tag is not None else None
            tie_value = tie_tag.value if tie_tag is not None else None
    except (OSError, ValueError, tifffile.TiffFileError) as exc:
        raise RasterError(f"file: unreadable GeoTIFF ({exc})") from exc

    n = len(BAND_ORDER)
    if arr.ndim == 2:
        raise RasterError(f"bands: expected {n} bands, got 1")
    if arr.ndim != 3:
        raise RasterError(f"bands: unsupported array shape {arr.shape}")
    if arr.shape[0] <= 16:
        planes = arr
    elif arr.shape[2] <= 16:
        planes = np.moveaxis(arr, 2, 0)
    else:
        raise RasterError(f"bands: expected {n} bands, got shape {arr.shape}")
    if planes.shape[0] < n:
        raise RasterError(f"bands: expected {n} bands, got {planes.shape[0]}")
    if len(band_order) != n or set(band_order) != set(BAND_ORDER):
        raise RasterError(f"band_order: must be a permutation of {BAND_ORDER}")

    if scale_value is None:
        raise RasterError("pixel_size: GeoTIFF ModelPixelScale tag missing")
    sx, sy = float(scale_value[0]), float(scale_value[1])
    if not math.isclose(sx, sy, rel_tol=1e-9):
        raise RasterError(f"pixel_size: non-square pixels ({sx} x {sy})")
    if tie_value is None:
        raise RasterError("origin: GeoTIFF ModelTiepoint tag missing")
    origin_x = float(tie_value[3]) - float(tie_value[0]) * sx
    origin_y = float(tie_value[4]) + float(tie_value[1]) * sy

    ordered = np.empty((n,) + planes.shape[1:], dtype=np.float32)
    for i, name in enumerate(BAND_ORDER):
        ordered[i] = planes[band_order.index(name)].astype(np.float32)
    return Raster(bands=ordered, origin_x=origin_x, origin_y=origin_y, pixel_size=sx)


def save_raster(path, raster: Raster) -> None:
    """Write a Raster as a 4-band float32 GeoTIFF with geo tags."""
    extratags = [
        (_TAG_SCALE, "d", 3, (raster.pixel_size, raster.pixel_size, 0.0), True),
        (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, raster.origin_x, raster.origin_y, 0.0), True),
    ]
    tifffile.imwrite(
        str(path),
        np.ascontiguousarray(raster.bands.astype(np.float32)),
        photometric="minisblack",
        planarconfig="separate",
        extratags=extratags,
    )


def compute_ndvi(raster: Raster) -> np.ndarray:
    """(NIR - R) / (NIR + R) per pixel; 0 where the denominator vanishes."""
    nir = raster.band("NIR").astype(np.float64)
    red = raster.band("R").astype(np.float64)
    den = nir + red
    out = np.zeros_like(den)
    np.divide(nir - red, den, out=out, where=den != 0)
    return out.astype(np.float32)


def extract_patch(
    raster: Raster,
    box: OrientedBox,
    out_h: int,
    out_w: int,
    stats: ImageStats,
) -> np.ndarray:
    """Sample a rotated window to a (4, out_h, out_w) normalized tensor.

    Rows run along the box h axis and columns along the w axis, so a
    zero-rotation box reduces to a plain crop.  Bilinear interpolation;
    out-of-bounds samples take the band mean so they normalize to zero.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    if not (0 <= box.cx <= raster.width - 1 and 0 <= box.cy <= raster.height - 1):
        raise ValueError(f"box center ({box.cx}, {box.cy}) outside raster")

    u = (np.arange(out_w) + 0.5) / out_w * box.w - 0.5 * box.w
    v = (np.arange(out_h) + 0.5) / out_h * box.h - 0.5 * box.h
    t = math.radians(box.theta_deg)
    ct, st = math.cos(t), math.sin(t)
    xs = box.cx + u[None, :] * ct - v[:, None] * st
    ys = box.cy + u[None, :] * st + v[:, None] * ct

    h, w = raster.height, raster.width
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(np.float32)
    fy = (ys - y0).astype(np.float32)

    out = np.empty((raster.bands.shape[0], out_h, out_w), dtype=np.float32)
    weights = (
        ((1 - fy) * (1 - fx), y0, x0),
        ((1 - fy) * fx, y0, x0 + 1),
        (fy * (1 - fx), y0 + 1, x0),
        (fy * fx, y0 + 1, x0 + 1),
    )
    for b in range(raster.bands.shape[0]):
        plane = raster.bands[b]
        mean = np.float32(stats.means[b])
        acc = np.zeros((out_h, out_w), dtype=np.float32)
        for wgt, yi, xi in weights:
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.where(valid, plane[yi.clip(0, h - 1), xi.clip(0, w - 1)], mean)
            acc += wgt * vals
        out[b] = (acc - mean) / np.float32(stats.stds[b])
    return out
