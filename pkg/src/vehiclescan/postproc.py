"""Detection post-processing: customized NMS and multi-temporal shadow removal.

NMS differs from the vanilla greedy form in three ways: anchors failing a
shape gate are discarded up front, suppression also triggers on intersection
over the smaller box area (which catches nested boxes in both directions),
and a suppressed anchor within a small probability margin of its group's
seed replaces it when it is the smallest box of the group.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import OrientedBox, box_intersection_area
from .raster import Raster
from .roadmask import RoadClass, RoadMask


@dataclass(frozen=True)
class ScoredAnchor:
    id: int
    box: OrientedBox
    prob: float


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    prob: float
    road_class: RoadClass = RoadClass.NON_ROAD


@dataclass(frozen=True)
class NmsParams:
    iou_thresh: float = 0.3
    ioa_thresh: float = 0.7
    retain_margin: float = 0.05
    margin_enabled: bool = True
    min_side_px: float = 2.0
    max_side_px: float = 44.0
    max_aspect: float = 6.0


@dataclass(frozen=True)
class ShadowParams:
    ratio_thresh: float | None = None  # None -> Otsu
    close_k: int = 5
    open_k: int = 9


def _shape_ok(box: OrientedBox, p: NmsParams) -> bool:
    return (
        box.short_side >= p.min_side_px
        and box.long_side <= p.max_side_px
        and box.aspect <= p.max_aspect
    )


def _suppresses(a: ScoredAnchor, b: ScoredAnchor, p: NmsParams) -> bool:
    inter = box_intersection_area(a.box, b.box)
    if inter <= 0:
        return False
    union = a.box.area + b.box.area - inter
    if union > 0 and inter / union >= p.iou_thresh:
        return True
    smaller = min(a.box.area, b.box.area)
    return smaller > 0 and inter / smaller >= p.ioa_thresh


def custom_nms(anchors, params: NmsParams = NmsParams(), road_mask: RoadMask | None = None):
    """Reduce scored anchors to final detections.

    Greedy by descending probability; each seed suppresses overlapping
    anchors (IoU or nested-box IoA), and within every suppression group the
    smallest member whose probability is within ``retain_margin`` of the
    seed is the one emitted.  When a road mask is given, the winning box
    takes the class under its center and off-road centers are dropped.
    """
    pool = sorted(
        (a for a in anchors if _shape_ok(a.box, params)),
        key=lambda a: (-a.prob, a.id),
    )
    detections = []
    while pool:
        seed = pool[0]
        group = [seed] + [a for a in pool[1:] if _suppresses(seed, a, params)]
        if params.margin_enabled:
            qualified = [a for a in group if a.prob >= seed.prob - params.retain_margin]
            winner = min(qualified, key=lambda a: (a.box.area, -a.prob, a.id))
        else:
            winner = seed
        group_ids = {a.id for a in group}
        pool = [
            a for a in pool
            if a.id not in group_ids and not _suppresses(winner, a, params)
        ]
        cls = RoadClass.NON_ROAD
        if road_mask is not None:
            cls = road_mask.class_at_pixel(winner.box.cy, winner.box.cx)
            if cls == RoadClass.NON_ROAD:
                continue
        detections.append(Detection(box=winner.box, prob=winner.prob, road_class=cls))
    return detections


def _hsi_ratio_score(raster: Raster) -> np.ndarray:
    """Tsai-style ratio image (hue + 1) / (intensity + 1) from R, G, B."""
    r = raster.band("R").astype(np.float64)
    g = raster.band("G").astype(np.float64)
    b = raster.band("B").astype(np.float64)
    intensity = (r + g + b) / 3.0
    num = 0.5 * ((r - g) + (r - b))
    den = np.sqrt((r - g) ** 2 + (r - b) * (g - b))
    cosang = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    hue = np.arccos(np.clip(cosang, -1.0, 1.0))
    hue = np.where(b > g, 2.0 * math.pi - hue, hue)
    hue /= 2.0 * math.pi
    peak = intensity.max()
    inten = intensity / peak if peak > 0 else intensity
    return (hue + 1.0) / (inten + 1.0)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram-based Otsu threshold for a float plane."""
    flat = values.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    w = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = w.sum()
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    mean_total = cum_m[-1] / total
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mean_total * cum_w - cum_m) ** 2 / (cum_w * (total - cum_w))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def shadow_coverage_mask(raster: Raster, params: ShadowParams = ShadowParams()) -> np.ndarray:
    """Boolean shadow plane: ratio-image threshold plus closing and opening.

    The 5x5 closing bridges gaps inside shadow regions; the subsequent 9x9
    opening deletes everything but large contiguous shadow areas.
    """
    score = _hsi_ratio_score(raster)
    thresh = params.ratio_thresh if params.ratio_thresh is not None else otsu_threshold(score)
    binary = score > thresh
    close_se = np.ones((params.close_k, params.close_k), dtype=bool)
    open_se = np.ones((params.open_k, params.open_k), dtype=bool)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(binary, structure=close_se, border_value=0),
        structure=close_se,
        border_value=0,
    )
    return ndimage.binary_dilation(
        ndimage.binary_erosion(closed, structure=open_se, border_value=0),
        structure=open_se,
        border_value=0,
    )


def _center_in_mask(det: Detection, mask: np.ndarray) -> bool:
    r = int(math.floor(det.box.cy + 0.5))
    c = int(math.floor(det.box.cx + 0.5))
    h, w = mask.shape
    return 0 <= r < h and 0 <= c < w and bool(mask[r, c])


def apply_shadow_union(dets_t1, dets_t2, m1: np.ndarray, m2: np.ndarray):
    """Drop detections under the union of both epochs' shadow masks."""
    if m1.shape != m2.shape:
        raise ValueError(f"shadow mask dims differ: {m1.shape} vs {m2.shape}")
    union = m1 | m2
    keep1 = [d for d in dets_t1 if not _center_in_mask(d, union)]
    keep2 = [d for d in dets_t2 if not _center_in_mask(d, union)]
    return keep1, keep2


# --- detection serialization -------------------------------------------------

def detection_to_dict(det: Detection, image_id: str | None = None) -> dict:
    d = {
        "box": [det.box.cx, det.box.cy, det.box.w, det.box.h, det.box.theta_deg],
        "prob": det.prob,
        "road_class": int(det.road_class),
    }
    if image_id is not None:
        d["image_id"] = image_id
    return d


def detection_from_dict(d: dict) -> Detection:
    cx, cy, w, h, theta = d["box"]
    return Detection(
        box=OrientedBox(cx, cy, w, h, theta),
        prob=float(d["prob"]),
        road_class=RoadClass(int(d.get("road_class", 0))),
    )


def save_detections(path, dets, image_id: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in dets:
            fh.write(json.dumps(detection_to_dict(det, image_id), sort_keys=True) + "\n")


def load_detections(path):
    dets = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                dets.append(detection_from_dict(json.loads(line)))
    return dets
