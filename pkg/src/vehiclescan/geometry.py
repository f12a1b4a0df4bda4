"""Oriented rectangles and the planar geometry shared by the detection stages.

Coordinates are (x, y) = (column, row) in pixel units unless a caller says
otherwise.  Angles are degrees; a box's ``w`` extent runs along its ``theta``
direction and ``h`` runs perpendicular to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center, extents and orientation in degrees."""

    cx: float
    cy: float
    w: float
    h: float
    theta_deg: float = 0.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def long_side(self) -> float:
        return max(self.w, self.h)

    @property
    def short_side(self) -> float:
        return min(self.w, self.h)

    @property
    def aspect(self) -> float:
        s = self.short_side
        return self.long_side / s if s > 0 else math.inf

    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise in xy."""
        t = math.radians(self.theta_deg)
        ct, st = math.cos(t), math.sin(t)
        hw, hh = 0.5 * self.w, 0.5 * self.h
        local = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
        rot = np.array([(ct, st), (-st, ct)])  # row-vector rotation
        return local @ rot + np.array([self.cx, self.cy])

    def contains_point(self, x: float, y: float, eps: float = 1e-9) -> bool:
        t = math.radians(self.theta_deg)
        ct, st = math.cos(t), math.sin(t)
        dx, dy = x - self.cx, y - self.cy
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        return abs(u) <= 0.5 * self.w + eps and abs(v) <= 0.5 * self.h + eps

    def rotated(self, delta_deg: float) -> "OrientedBox":
        return OrientedBox(self.cx, self.cy, self.w, self.h, self.theta_deg + delta_deg)

    def canonical(self) -> "OrientedBox":
        """Unique representative among the rotations describing the same rectangle.

        Ensures h >= w; theta is reduced mod 180 (mod 90 for squares).
        """
        w, h, theta = self.w, self.h, self.theta_deg
        if w > h:
            w, h = h, w
            theta += 90.0
        theta %= 180.0
        if w == h:
            theta %= 90.0
        return OrientedBox(self.cx, self.cy, w, h, theta)


def points_in_box(box: OrientedBox, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized membership test for arrays of points."""
    t = math.radians(box.theta_deg)
    ct, st = math.cos(t), math.sin(t)
    dx = xs - box.cx
    dy = ys - box.cy
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (np.abs(u) <= 0.5 * box.w) & (np.abs(v) <= 0.5 * box.h)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; returns hull vertices counter-clockwise."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    # unique() sorts lexicographically, which is what the chain scan needs
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (absolute value)."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def min_area_rect(points: np.ndarray) -> OrientedBox:
    """Minimum-area enclosing rectangle via edge-direction sweep over the hull.

    The optimum is flush with a hull edge, so scanning hull-edge directions is
    exact.  Result is canonical (h >= w).
    """
    hull = convex_hull(points)
    if len(hull) == 1:
        x, y = hull[0]
        return OrientedBox(float(x), float(y), 0.0, 0.0, 0.0)
    if len(hull) == 2:
        (x0, y0), (x1, y1) = hull
        theta = math.degrees(math.atan2(y1 - y0, x1 - x0))
        w = math.hypot(x1 - x0, y1 - y0)
        return OrientedBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), w, 0.0, theta).canonical()

    best = None
    edges = np.roll(hull, -1, axis=0) - hull
    for ex, ey in edges:
        norm = math.hypot(ex, ey)
        if norm == 0:
            continue
        ct, st = ex / norm, ey / norm
        u = hull[:, 0] * ct + hull[:, 1] * st
        v = -hull[:, 0] * st + hull[:, 1] * ct
        u0, u1 = u.min(), u.max()
        v0, v1 = v.min(), v.max()
        area = (u1 - u0) * (v1 - v0)
        if best is None or area < best[0]:
            uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
            cx = uc * ct - vc * st
            cy = uc * st + vc * ct
            best = (area, cx, cy, u1 - u0, v1 - v0, math.degrees(math.atan2(st, ct)))
    _, cx, cy, w, h, theta = best
    return OrientedBox(float(cx), float(cy), float(w), float(h), float(theta)).canonical()


def pixels_min_area_rect(rows: np.ndarray, cols: np.ndarray) -> OrientedBox:
    """Minimum rectangle around a pixel set, treating pixels as unit squares."""
    r = np.asarray(rows, dtype=np.float64)
    c = np.asarray(cols, dtype=np.float64)
    corners = np.concatenate(
        [
            np.stack([c - 0.5, r - 0.5], axis=1),
            np.stack([c + 0.5, r - 0.5], axis=1),
            np.stack([c + 0.5, r + 0.5], axis=1),
            np.stack([c - 0.5, r + 0.5], axis=1),
        ]
    )
    return min_area_rect(corners)


def pixels_hull_area(rows: np.ndarray, cols: np.ndarray) -> float:
    """Convex-hull area of a pixel set (unit-square pixels)."""
    r = np.asarray(rows, dtype=np.float64)
    c = np.asarray(cols, dtype=np.float64)
    corners = np.concatenate(
        [
            np.stack([c - 0.5, r - 0.5], axis=1),
            np.stack([c + 0.5, r - 0.5], axis=1),
            np.stack([c + 0.5, r + 0.5], axis=1),
            np.stack([c - 0.5, r + 0.5], axis=1),
        ]
    )
    return polygon_area(convex_hull(corners))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by a convex ccw ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0
        for cur in input_pts:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0
            if cur_in != prev_in:
                # intersection of segment prev->cur with the clip edge line
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0:
                    t = (ey * (prev[0] - ax) - ex * (prev[1] - ay)) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.empty((0, 2))


def box_intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    # cheap reject: centers farther apart than the sum of circumradii
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = clip_polygon(a.corners(), b.corners())
    return polygon_area(inter)


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = box_intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_ioa(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over the area of ``b``."""
    if b.area <= 0:
        return 0.0
    return box_intersection_area(a, b) / b.area
