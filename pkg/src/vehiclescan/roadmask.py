"""OSM highway-tag classification and buffered road-mask rasterization."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import tifffile

from .raster import _TAG_SCALE, _TAG_TIEPOINT, Raster


class RoadClass(IntEnum):
    """Road tiers; numeric order doubles as overlap priority."""

    NON_ROAD = 0
    LOCAL = 1
    COLLECTOR = 2
    ARTERIAL = 3


_ARTERIAL = {"motorway", "trunk", "primary"}
_COLLECTOR = {"secondary", "tertiary", "unclassified"}
_LOCAL = {"residential", "living_street"}


def classify_highway_tag(tag: str):
    """Map an OSM highway tag to (RoadClass, buffer width in meters)."""
    base = tag[:-5] if tag.endswith("_link") else tag
    if base in _ARTERIAL:
        return RoadClass.ARTERIAL, 20.0
    if base in _COLLECTOR:
        return RoadClass.COLLECTOR, 20.0
    if tag in _LOCAL:
        return RoadClass.LOCAL, 15.0
    return RoadClass.NON_ROAD, 0.0


@dataclass(frozen=True)
class RoadLine:
    points: np.ndarray  # (N, 2) CRS meters
    highway: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("polyline needs at least 2 (x, y) vertices")
        if not np.isfinite(pts).all():
            raise ValueError("polyline coordinates must be finite")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class RoadNetwork:
    lines: tuple

    @classmethod
    def from_lines(cls, lines) -> "RoadNetwork":
        return cls(lines=tuple(lines))


@dataclass(frozen=True)
class RoadMask:
    classes: np.ndarray  # (H, W) uint8 of RoadClass values
    origin_x: float
    origin_y: float
    pixel_size: float

    @property
    def road(self) -> np.ndarray:
        return self.classes != RoadClass.NON_ROAD

    def class_at_pixel(self, row: float, col: float) -> RoadClass:
        r = int(math.floor(row + 0.5))
        c = int(math.floor(col + 0.5))
        h, w = self.classes.shape
        if 0 <= r < h and 0 <= c < w:
            return RoadClass(int(self.classes[r, c]))
        return RoadClass.NON_ROAD


def load_road_network(path) -> RoadNetwork:
    """Read a GeoJSON FeatureCollection of LineStrings with a highway property."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    lines = []
    for feat in data.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            warnings.warn(f"skipping non-LineString geometry {geom.get('type')}")
            continue
        tag = (feat.get("properties") or {}).get("highway", "")
        lines.append(RoadLine(points=np.asarray(geom["coordinates"], dtype=np.float64), highway=str(tag)))
    return RoadNetwork.from_lines(lines)


def save_road_network(path, net: RoadNetwork) -> None:
    features = [
        {
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": line.points.tolist()},
            "properties": {"highway": line.highway},
        }
        for line in net.lines
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, sort_keys=True)


def build_road_mask(net: RoadNetwork, target: Raster) -> RoadMask:
    """Label each pixel with the highest-priority buffered road covering its center."""
    h, w = target.height, target.width
    classes = np.zeros((h, w), dtype=np.uint8)
    ps = target.pixel_size
    x0, y0 = target.origin_x, target.origin_y

    any_road = False
    for line in net.lines:
        cls, buf = classify_highway_tag(line.highway)
        if cls == RoadClass.NON_ROAD:
            continue
        any_road = True
        pts = line.points
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            # pixel window covering the buffered segment
            c_lo = int(math.floor((min(ax, bx) - buf - x0) / ps - 0.5))
            c_hi = int(math.ceil((max(ax, bx) + buf - x0) / ps - 0.5))
            r_lo = int(math.floor((y0 - max(ay, by) - buf) / ps - 0.5))
            r_hi = int(math.ceil((y0 - min(ay, by) + buf) / ps - 0.5))
            c_lo, c_hi = max(c_lo, 0), min(c_hi, w - 1)
            r_lo, r_hi = max(r_lo, 0), min(r_hi, h - 1)
            if c_lo > c_hi or r_lo > r_hi:
                continue
            cols = np.arange(c_lo, c_hi + 1)
            rows = np.arange(r_lo, r_hi + 1)
            px = x0 + (cols + 0.5) * ps
            py = y0 - (rows + 0.5) * ps
            d2 = _point_segment_dist2(px[None, :], py[:, None], ax, ay, bx, by)
            covered = d2 <= buf * buf
            sub = classes[r_lo : r_hi + 1, c_lo : c_hi + 1]
            np.maximum(sub, np.where(covered, np.uint8(cls), 0).astype(np.uint8), out=sub)

    if not any_road:
        warnings.warn("road network empty; mask is all non-road")
    return RoadMask(classes=classes, origin_x=x0, origin_y=y0, pixel_size=ps)


def _point_segment_dist2(px, py, ax, ay, bx, by):
    """Squared distance from points to segment (a, b); broadcasts over px/py."""
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0:
        ex = px - ax
        ey = py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * dx + (py - ay) * dy) / seg2
    t = np.clip(t, 0.0, 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey


def save_road_mask(path, mask: RoadMask) -> None:
    """Emit the class plane as a single-band uint8 GeoTIFF (codes 0..3)."""
    extratags = [
        (_TAG_SCALE, "d", 3, (mask.pixel_size, mask.pixel_size, 0.0), True),
        (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, mask.origin_x, mask.origin_y, 0.0), True),
    ]
    tifffile.imwrite(str(path), mask.classes, extratags=extratags)


def load_road_mask(path) -> RoadMask:
    with tifffile.TiffFile(str(path)) as tf:
        arr = tf.asarray()
        page = tf.pages[0]
        scale = page.tags.get(_TAG_SCALE).value
        tie = page.tags.get(_TAG_TIEPOINT).value
    return RoadMask(
        classes=arr.astype(np.uint8),
        origin_x=float(tie[3]),
        origin_y=float(tie[4]),
        pixel_size=float(scale[0]),
    )
