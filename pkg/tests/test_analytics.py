import csv
import itertools
import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vehiclescan.analytics import (
    ClassCounts,
    DensityGrid,
    change_ratio,
    classify_value,
    count_vehicles,
    density_grid,
    equal_interval_breaks,
    jenks_breaks,
    jenks_total_ssd,
    quad_regression,
    round_half_away,
    write_counts_csv,
    write_grid_csv,
)
from vehiclescan.geometry import OrientedBox
from vehiclescan.postproc import Detection
from vehiclescan.roadmask import RoadClass

TABLE4 = {
    # city: (total_before, total_after, arterial_before, arterial_after,
    #        printed_total_ratio, printed_arterial_ratio)
    "wuhan": (59338, 24620, 25736, 6186, -58.51, -75.96),
    "milan": (35908, 20929, 4316, 1596, -41.71, -63.02),
    "madrid": (64581, 66327, 18376, 9649, +2.70, -47.49),
    "paris": (35449, 19326, 16964, 6000, -45.48, -64.63),
    "new_york": (33408, 38101, 15358, 12632, +14.05, -17.75),
    "london": (33782, 37004, 9231, 6585, +9.54, -28.66),
}


def det(cls, cx=10.0, cy=10.0):
    return Detection(box=OrientedBox(cx, cy, 10, 4, 0), prob=0.9, road_class=cls)


# --- counting -------------------------------------------------------------------

def test_count_empty():
    assert count_vehicles([]) == ClassCounts(0, 0, 0, 0)


def test_count_mixed_classes():
    dets = [det(RoadClass.ARTERIAL)] * 3 + [det(RoadClass.LOCAL)] * 2
    counts = count_vehicles(dets)
    assert counts.total == 5 and counts.arterial == 3 and counts.local == 2
    assert counts.total == counts.arterial + counts.collector + counts.local


def test_counts_match_planted_scene_manifest():
    from vehiclescan import synth

    spec = synth.random_scene_spec(seed=19, n_vehicles=40, width=384, height=384)
    _, _, truth = synth.generate_scene(spec)
    dets = [Detection(box=t.box, prob=1.0, road_class=t.road_class) for t in truth.vehicles]
    counts = count_vehicles(dets)
    manifest = {cls: sum(1 for t in truth.vehicles if t.road_class == cls)
                for cls in (RoadClass.ARTERIAL, RoadClass.COLLECTOR, RoadClass.LOCAL)}
    assert counts.total == len(truth)
    assert counts.arterial == manifest[RoadClass.ARTERIAL]
    assert counts.collector == manifest[RoadClass.COLLECTOR]
    assert counts.local == manifest[RoadClass.LOCAL]


# --- change ratio ------------------------------------------------------------------

@pytest.mark.parametrize("city", sorted(TABLE4))
def test_change_ratio_reproduces_published_rows(city):
    tb, ta, ab, aa, tot, art = TABLE4[city]
    assert round_half_away(change_ratio(tb, ta)) == pytest.approx(tot, abs=0.01)
    assert round_half_away(change_ratio(ab, aa)) == pytest.approx(art, abs=0.01)


def test_arterial_average_reduction():
    ratios = [change_ratio(ab, aa) for (_, _, ab, aa, _, _) in TABLE4.values()]
    assert sum(ratios) / len(ratios) == pytest.approx(-49.59, abs=0.01)


def test_change_ratio_rejects_zero_before():
    with pytest.raises(ValueError, match="undefined"):
        change_ratio(0, 5)


@settings(max_examples=80, deadline=None)
@given(a=st.integers(1, 10**6))
def test_change_ratio_identity(a):
    assert change_ratio(a, a) == 0.0


@settings(max_examples=80, deadline=None)
@given(
    before=st.integers(1, 10**5),
    delta=st.integers(1, 10**5),
    after=st.integers(0, 10**5),
)
def test_change_ratio_antitone_in_before(before, delta, after):
    assert change_ratio(before + delta, after) <= change_ratio(before, after) or after < before


def test_round_half_away_from_zero():
    assert round_half_away(-58.505) == -58.51
    assert round_half_away(2.695) == 2.70
    assert round_half_away(-0.005) == -0.01


# --- density grid --------------------------------------------------------------------

def test_single_point_in_block_center():
    g = density_grid([(450.0, 450.0)], (0.0, 0.0, 900.0, 900.0), 300.0)
    assert g.cells.shape == (3, 3)
    assert g.cells[1, 1] == 1 and g.total == 1


def test_shared_edge_goes_to_lower_index_block():
    # x = 300 exactly on the edge between col 0 and col 1
    g = density_grid([(300.0, 450.0)], (0.0, 0.0, 900.0, 900.0), 300.0)
    assert g.cells[1, 0] == 1 and g.cells[1, 1] == 0
    # y = 600: edge between row 0 (top band) and row 1
    g = density_grid([(450.0, 600.0)], (0.0, 0.0, 900.0, 900.0), 300.0)
    assert g.cells[0, 1] == 1 and g.cells[1, 1] == 0


def test_grid_conserves_counts(rng):
    pts = list(zip(rng.uniform(0, 1000, 1000), rng.uniform(0, 700, 1000)))
    for block in (300.0, 120.0, 57.0):
        g = density_grid(pts, (0.0, 0.0, 1000.0, 700.0), block)
        assert g.total == 1000


def test_grid_rejects_outside_points():
    with pytest.raises(ValueError, match="outside"):
        density_grid([(1500.0, 10.0)], (0.0, 0.0, 900.0, 900.0), 300.0)


# --- jenks ------------------------------------------------------------------------------

def brute_force_min_ssd(values, k):
    """Exhaustive contiguous-partition minimum.

    Each partition is scored with the same segment-local arithmetic as
    jenks_total_ssd so that equal partitions produce bit-equal totals.
    """
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = len(vals)

    def cost(i, j):
        seg = vals[i:j]
        return float(((seg - seg.mean()) ** 2).sum())

    best = math.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = [0, *cuts, n]
        total = 0.0
        for i, j in zip(bounds[:-1], bounds[1:]):
            total += cost(i, j)
        best = min(best, total)
    return best


def test_jenks_two_clusters():
    breaks = jenks_breaks([1, 1, 1, 9, 9, 9], 2)
    assert breaks == [1.0]
    assert jenks_total_ssd([1, 1, 1, 9, 9, 9], breaks) == 0.0


def test_jenks_rejects_degenerate_inputs():
    with pytest.raises(ValueError, match="distinct"):
        jenks_breaks([4.0, 4.0, 4.0, 4.0], 2)
    with pytest.raises(ValueError):
        jenks_breaks([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        jenks_breaks([1.0, 2.0, 3.0], 1)


def test_jenks_matches_exhaustive_minimum(rng):
    for _ in range(60):
        n = int(rng.integers(4, 13))
        k = int(rng.integers(2, min(5, n + 1)))
        vals = rng.uniform(0, 100, n)
        breaks = jenks_breaks(vals, k)
        assert jenks_total_ssd(vals, breaks) == brute_force_min_ssd(vals, k)


def test_jenks_with_ties_matches_exhaustive(rng):
    for _ in range(40):
        n = int(rng.integers(5, 12))
        k = int(rng.integers(2, 5))
        vals = rng.integers(0, 6, n).astype(float)
        if len(np.unique(vals)) < k:
            continue
        breaks = jenks_breaks(vals, k)
        got = jenks_total_ssd(vals, breaks)
        want = brute_force_min_ssd(vals, k)
        assert got == pytest.approx(want, abs=1e-9)


def test_jenks_permutation_invariant(rng):
    vals = rng.uniform(0, 50, 10)
    b1 = jenks_breaks(vals, 3)
    b2 = jenks_breaks(rng.permutation(vals), 3)
    assert b1 == b2


def test_classify_value_breaks_convention():
    breaks = [1.0, 9.0]
    assert classify_value(1.0, breaks) == 0  # inclusive upper bound
    assert classify_value(1.5, breaks) == 1
    assert classify_value(9.0, breaks) == 1
    assert classify_value(10.0, breaks) == 2


def test_equal_interval_breaks():
    assert equal_interval_breaks([0.0, 10.0], 5) == [2.0, 4.0, 6.0, 8.0]


# --- quadratic regression -----------------------------------------------------------------

def test_exact_quadratic_recovered():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    fit = quad_regression(x, x * x)
    assert fit.a == pytest.approx(1.0, abs=1e-9)
    assert fit.b == pytest.approx(0.0, abs=1e-9)
    assert fit.c == pytest.approx(0.0, abs=1e-8)
    assert fit.r2 == 1.0


def longdouble_normal_equation_fit(x, y):
    x = np.asarray(x, dtype=np.longdouble)
    y = np.asarray(y, dtype=np.longdouble)
    design = np.stack([x * x, x, np.ones_like(x)], axis=1)
    ata = design.T @ design
    aty = design.T @ y
    # Gaussian elimination with partial pivoting in extended precision
    m = np.concatenate([ata, aty[:, None]], axis=1)
    for col in range(3):
        piv = col + int(np.argmax(np.abs(m[col:, col])))
        m[[col, piv]] = m[[piv, col]]
        m[col] = m[col] / m[col, col]
        for row in range(3):
            if row != col:
                m[row] = m[row] - m[row, col] * m[col]
    return m[:, 3]


def test_regression_matches_extended_precision_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(6, 20))
        x = rng.uniform(0, 100, n)
        coef = rng.uniform(-2, 2, 3)
        y = coef[0] * x * x + coef[1] * x + coef[2] + rng.normal(0, 5.0, n)
        fit = quad_regression(x, y)
        want = longdouble_normal_equation_fit(x, y)
        for got, ref in zip(fit.coefficients, want):
            assert abs(got - float(ref)) <= 1e-9 * max(1.0, abs(float(ref)))


def test_regression_r2_invariant_under_affine_x(rng):
    x = rng.uniform(0, 10, 8)
    y = rng.uniform(-5, 5, 8)
    base = quad_regression(x, y)
    shifted = quad_regression(3.7 * x - 12.0, y)
    assert shifted.r2 == pytest.approx(base.r2, abs=1e-9)


def test_regression_rejects_bad_designs():
    with pytest.raises(ValueError, match="at least 4"):
        quad_regression([1, 2, 3], [1, 4, 9])
    with pytest.raises(ValueError, match="rank-deficient"):
        quad_regression([1, 1, 2, 3], [1, 1, 4, 9])
    with pytest.raises(ValueError, match="constant y"):
        quad_regression([1, 2, 3, 4], [5, 5, 5, 5])


@pytest.mark.skipif(
    "VEHICLESCAN_STRINGENCY_FILE" not in os.environ,
    reason="needs user-supplied city-wise stringency indices",
)
def test_stringency_regression_matches_published_r2():
    # arterial change ratios against user-supplied city-wise indices
    with open(os.environ["VEHICLESCAN_STRINGENCY_FILE"], "r", encoding="utf-8") as fh:
        indices = json.load(fh)
    xs, ys = [], []
    for city, (tb, ta, ab, aa, _, _) in TABLE4.items():
        xs.append(float(indices[city]))
        ys.append(change_ratio(ab, aa))
    fit = quad_regression(xs, ys)
    assert fit.r2 >= 0.83


# --- emission ---------------------------------------------------------------------------

def test_counts_csv_layout(tmp_path):
    rows = {
        "wuhan": {
            "before": ClassCounts(total=59338, arterial=25736, collector=20000, local=13602),
            "after": ClassCounts(total=24620, arterial=6186, collector=10000, local=8434),
        }
    }
    path = tmp_path / "counts.csv"
    write_counts_csv(path, rows)
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["city", "epoch", "total", "arterial", "collector", "local"]
    assert lines[1][:3] == ["wuhan", "before", "59338"]
    assert lines[3][0:2] == ["wuhan", "change_ratio"]
    assert lines[3][2] == "-58.51%"
    assert lines[3][3] == "-75.96%"


def test_grid_csv_roundtrip_counts(tmp_path, rng):
    cells = rng.integers(0, 20, (4, 5))
    grid = DensityGrid(origin_x=0, origin_y=1200, block_m=300, cells=cells,
                       slicing="equal_interval", breaks=[5.0, 10.0, 15.0])
    path = tmp_path / "grid.csv"
    write_grid_csv(path, grid)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) == 20
    assert sum(int(r[2]) for r in rows) == int(cells.sum())
