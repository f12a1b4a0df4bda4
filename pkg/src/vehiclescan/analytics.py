"""Transportation-density analytics: per-class counts, change ratios, block
density grids with equal-interval / natural-breaks slicing, and quadratic
regression of change against policy stringency."""

from __future__ import annotations

import csv
import math
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .roadmask import RoadClass


@dataclass(frozen=True)
class ClassCounts:
    total: int
    arterial: int
    collector: int
    local: int


def count_vehicles(dets) -> ClassCounts:
    """Per-road-class tallies of a detection list."""
    arterial = sum(1 for d in dets if d.road_class == RoadClass.ARTERIAL)
    collector = sum(1 for d in dets if d.road_class == RoadClass.COLLECTOR)
    local = sum(1 for d in dets if d.road_class == RoadClass.LOCAL)
    return ClassCounts(
        total=arterial + collector + local,
        arterial=arterial,
        collector=collector,
        local=local,
    )


def change_ratio(before: float, after: float) -> float:
    """Percent change from before to after; requires before > 0."""
    if not before > 0:
        raise ValueError(f"change ratio undefined for before={before}")
    return 100.0 * (after - before) / before


def round_half_away(x: float, digits: int = 2) -> float:
    """Round half away from zero (so -58.505 -> -58.51)."""
    scale = 10.0**digits
    return math.copysign(math.floor(abs(x) * scale + 0.5), x) / scale


@dataclass
class DensityGrid:
    origin_x: float
    origin_y: float  # top edge; rows count downward
    block_m: float
    cells: np.ndarray  # (rows, cols) int64
    slicing: str = "none"
    breaks: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.cells.sum())


def _block_index(offset: float, block_m: float, n: int) -> int:
    # half-open blocks (k*B, (k+1)*B]; points on a shared edge go low
    idx = math.ceil(offset / block_m) - 1
    return min(max(idx, 0), n - 1)


def density_grid(points_m, extent, block_m: float = 300.0) -> DensityGrid:
    """Count points into square blocks anchored at the extent's top-left.

    ``extent`` is (x_min, y_min, x_max, y_max) in meters and must cover all
    points; ``points_m`` is an iterable of (x, y).
    """
    x_min, y_min, x_max, y_max = extent
    if x_max <= x_min or y_max <= y_min:
        raise ValueError("empty extent")
    n_cols = max(1, math.ceil((x_max - x_min) / block_m))
    n_rows = max(1, math.ceil((y_max - y_min) / block_m))
    cells = np.zeros((n_rows, n_cols), dtype=np.int64)
    for x, y in points_m:
        if not (x_min <= x <= x_max and y_min <= y <= y_max):
            raise ValueError(f"point ({x}, {y}) outside extent")
        col = _block_index(x - x_min, block_m, n_cols)
        row = _block_index(y_max - y, block_m, n_rows)
        cells[row, col] += 1
    return DensityGrid(origin_x=x_min, origin_y=y_max, block_m=block_m, cells=cells)


def jenks_breaks(values, k: int):
    """Fisher-Jenks exact natural breaks.

    Minimizes the total within-class sum of squared deviations over
    contiguous classes of the sorted values.  Returns the k-1 inclusive
    upper bounds of the lower classes.
    """
    vals = np.sort(np.asarray(list(values), dtype=np.float64))
    n = len(vals)
    if k < 2:
        raise ValueError("need at least 2 classes")
    if n < k:
        raise ValueError(f"need at least {k} values for {k} classes")
    if len(np.unique(vals)) < k:
        raise ValueError(f"need at least {k} distinct values for {k} classes")

    s1 = np.concatenate([[0.0], np.cumsum(vals)])
    s2 = np.concatenate([[0.0], np.cumsum(vals * vals)])

    def cost(i: int, j: int) -> float:
        # within-class SSD of vals[i:j]
        m = j - i
        t = s1[j] - s1[i]
        return (s2[j] - s2[i]) - t * t / m

    # Cuts are restricted to boundaries between distinct values: an optimal
    # contiguous partition never needs to split a run of equal values, and
    # this keeps the returned break values faithful to the partition.
    positions = [0] + [i for i in range(1, n) if vals[i - 1] < vals[i]] + [n]
    npos = len(positions)

    inf = math.inf
    dp = np.full((k + 1, npos), inf)
    cut = np.zeros((k + 1, npos), dtype=np.int64)
    dp[0, 0] = 0.0
    for m in range(1, k + 1):
        for jp in range(1, npos):
            j = positions[jp]
            best, arg = inf, 0
            for ip in range(jp):
                if not math.isfinite(dp[m - 1, ip]):
                    continue
                c = dp[m - 1, ip] + cost(positions[ip], j)
                if c < best:
                    best, arg = c, ip
            dp[m, jp] = best
            cut[m, jp] = arg
    bounds = [n]
    jp = npos - 1
    for m in range(k, 0, -1):
        jp = int(cut[m, jp])
        bounds.append(positions[jp])
    bounds.reverse()  # [0, b1, ..., b_{k-1}, n]
    return [float(vals[b - 1]) for b in bounds[1:-1]]


def jenks_total_ssd(values, breaks) -> float:
    """Within-class SSD of a value set under inclusive upper-bound breaks."""
    vals = np.sort(np.asarray(list(values), dtype=np.float64))
    ssd = 0.0
    start = 0
    cuts = list(breaks) + [math.inf]
    for ub in cuts:
        end = start
        while end < len(vals) and vals[end] <= ub:
            end += 1
        if end > start:
            seg = vals[start:end]
            ssd += float(((seg - seg.mean()) ** 2).sum())
        start = end
    return ssd


def equal_interval_breaks(values, k: int):
    """k-1 inner boundaries of equal-width intervals over the value range."""
    vals = np.asarray(list(values), dtype=np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    return [lo + (hi - lo) * i / k for i in range(1, k)]


def classify_value(v: float, breaks) -> int:
    """Class index of v under inclusive upper-bound breaks."""
    return bisect_left(breaks, v)


@dataclass(frozen=True)
class RegressionResult:
    a: float
    b: float
    c: float
    r2: float

    @property
    def coefficients(self):
        return (self.a, self.b, self.c)


def quad_regression(x, y) -> RegressionResult:
    """Least-squares fit of y = a x^2 + b x + c with R-squared.

    The design matrix is built in standardized coordinates for conditioning
    and the coefficients are mapped back to the original units.
    """
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    if len(x) < 4:
        raise ValueError("need at least 4 points")
    if len(np.unique(x)) <= 3:
        raise ValueError("rank-deficient design: need more than 3 distinct x values")
    mu = float(x.mean())
    sd = float(x.std())
    u = (x - mu) / sd
    design = np.stack([u * u, u, np.ones_like(u)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    alpha, beta, gamma = (float(c) for c in coef)

    a = alpha / sd**2
    b = beta / sd - 2.0 * alpha * mu / sd**2
    c = gamma - beta * mu / sd + alpha * mu**2 / sd**2

    resid = y - design @ coef
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if not ss_tot > 0:
        raise ValueError("constant y: R-squared undefined")
    return RegressionResult(a=a, b=b, c=c, r2=1.0 - ss_res / ss_tot)


# --- report emission ---------------------------------------------------------

def write_counts_csv(path, rows) -> None:
    """Counts table: one row per (city, epoch) plus a change-ratio row per city.

    ``rows`` maps city -> {"before": ClassCounts, "after": ClassCounts}.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["city", "epoch", "total", "arterial", "collector", "local"])
        for city, pair in rows.items():
            before, after = pair["before"], pair["after"]
            wr.writerow(["%s" % city, "before", before.total, before.arterial,
                         before.collector, before.local])
            wr.writerow(["%s" % city, "after", after.total, after.arterial,
                         after.collector, after.local])
            ratios = []
            for field_name in ("total", "arterial", "collector", "local"):
                b = getattr(before, field_name)
                a = getattr(after, field_name)
                if b > 0:
                    ratios.append("%+.2f%%" % round_half_away(change_ratio(b, a)))
                else:
                    ratios.append("")
            wr.writerow([city, "change_ratio", *ratios])


def write_grid_csv(path, grid: DensityGrid) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["block_row", "block_col", "count", "class_index"])
        for r in range(grid.cells.shape[0]):
            for c in range(grid.cells.shape[1]):
                v = int(grid.cells[r, c])
                cls = classify_value(v, grid.breaks) if grid.breaks else 0
                wr.writerow([r, c, v, cls])


def render_grid_png(path, grid: DensityGrid, title: str = "", cmap: str = "viridis") -> None:
    """Class-sliced heatmap of a density grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if grid.breaks:
        classed = np.empty(grid.cells.shape, dtype=np.int64)
        flat = grid.cells.ravel()
        classed = np.array([classify_value(float(v), grid.breaks) for v in flat]).reshape(
            grid.cells.shape
        )
        data = classed
        vmax = len(grid.breaks)
    else:
        data = grid.cells
        vmax = max(1, int(grid.cells.max()))
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(data, cmap=cmap, vmin=0, vmax=vmax, interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.savefig(path, dpi=100)
    plt.close(fig)
