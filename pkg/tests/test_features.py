import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import line_panel, random_panel
from hiermig.data import FlowObservation, FlowPanel, Region, load_panel_dir
from hiermig.errors import ValidationError
from hiermig.features import (
    GRAVITY_COLUMNS,
    build_design,
    intervening_matrix,
    intervening_population,
    logistic_zscore,
    upsample,
)


def scan_oracle(i, j, pops, d):
    # independent scan: sort by distance from i and sum strictly-closer regions
    order = sorted(range(len(pops)), key=lambda k: d[i][k])
    total = 0.0
    for k in order:
        if d[i][k] >= d[i][j]:
            break
        if k not in (i, j):
            total += pops[k]
    return total


def test_line_example():
    panel = line_panel([10, 20, 30, 40])
    assert intervening_population(0, 3, 2005, panel) == 50
    assert intervening_population(0, 1, 2005, panel) == 0  # nearest neighbour
    assert intervening_population(3, 0, 2005, panel) == 20 + 30  # farthest: all but P_i, P_j


def test_distance_ties_are_excluded():
    # regions at -1 and +1 degrees are equidistant from the middle one
    regions = [Region(f"T{k}", "", 0.0, float(x), 1.0) for k, x in enumerate((0.0, -1.0, 1.0))]
    pops = {(r.id, 2005): 5.0 for r in regions}
    panel = FlowPanel(regions, [FlowObservation("T0", "T1", 2005, 1, 1)], pops)
    assert intervening_population(0, 1, 2005, panel) == 0
    assert intervening_population(0, 2, 2005, panel) == 0


def test_exhaustive_small_panels():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(3, 9))
        panel = random_panel(rng, n)
        d = panel.distance_matrix()
        pops = [panel.population(r, 2005) for r in panel.region_ids]
        S = intervening_matrix(d, np.array(pops))
        for i in range(n):
            for j in range(n):
                if i != j:
                    expected = scan_oracle(i, j, pops, d)
                    assert S[i, j] == expected
                    assert intervening_population(i, j, 2005, panel, d) == expected


@given(st.lists(st.floats(0.01, 50.0), min_size=3, max_size=7, unique=True), st.data())
def test_monotone_in_destination_distance(xs, data):
    pops = np.arange(1, len(xs) + 1, dtype=float)
    d = np.abs(np.subtract.outer(xs, xs))
    S = intervening_matrix(d, pops)
    i = data.draw(st.integers(0, len(xs) - 1))
    js = sorted((j for j in range(len(xs)) if j != i), key=lambda j: d[i, j])
    # S(i, j) never decreases as the destination moves farther from i
    vals = [S[i, j] for j in js]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_gravity_unit_row():
    e = math.e
    # distance of exactly e km between two equatorial points
    dlon = math.degrees(e / 6371.0088)
    regions = [Region("A", "", 0.0, 0.0, 1.0), Region("B", "", 0.0, dlon, 1.0)]
    pops = {("A", 2005): e, ("B", 2005): e}
    obs = [FlowObservation("A", "B", 2005, 3, 3)]
    panel = FlowPanel(regions, obs, pops)
    d = np.array([[0.0, e], [e, 0.0]])
    des = build_design(panel, "gravity", distance_matrix=d)
    assert des.X[0] == pytest.approx([1, 1, 1])
    assert des.y[0] == pytest.approx(math.log(3))
    assert des.columns == GRAVITY_COLUMNS


def test_radiation_nearest_neighbour_columns():
    panel = line_panel([10, 20, 30, 40])
    des = build_design(panel, "radiation")
    pid = panel.pair_index().index(0, 1)
    row = des.X[des.pair_id == pid][0]
    assert row[2] == pytest.approx(math.log(10))
    assert row[3] == pytest.approx(math.log(30))


def test_radiation_matrix_matches_definition():
    pops = [10, 20, 30, 40]
    panel = line_panel(pops)
    des = build_design(panel, "radiation")
    d = panel.distance_matrix()
    pairs = panel.pair_index()
    for row, pid in zip(des.X, des.pair_id):
        i, j = pairs.pair(pid)
        s = scan_oracle(i, j, pops, d)
        expected = [math.log(pops[i]), math.log(pops[j]), math.log(pops[i] + s), math.log(pops[i] + pops[j] + s)]
        assert row == pytest.approx(expected, abs=1e-12)


def test_design_is_deterministic_and_ordered(fixtures):
    panel = load_panel_dir(fixtures / "tiny")
    a = build_design(panel, "gravity")
    b = build_design(panel, "gravity")
    assert np.array_equal(a.X, b.X) and np.array_equal(a.pair_id, b.pair_id)
    keys = list(zip(a.pair_id, a.year))
    assert keys == sorted(keys)
    # the zero-midpoint observation is dropped
    assert a.n_obs == 11


def test_radiation_error_has_row_context(fixtures):
    panel = load_panel_dir(fixtures / "no_radiation")
    build_design(panel, "gravity")
    with pytest.raises(ValidationError, match=r"radiation features for row \d+ .*'DD' in year 2006"):
        build_design(panel, "radiation")


def test_unknown_form():
    with pytest.raises(ValidationError):
        build_design(line_panel([1, 2]), "exponential")


def test_upsample_caps_rows_per_pair():
    panel = line_panel([10, 20, 30], years=tuple(range(2000, 2015)))
    des = build_design(panel, "gravity")
    up = upsample(des)
    counts = np.bincount(up.pair_id)
    assert counts.max() == 60
    small = build_design(line_panel([10, 20], years=(2000, 2001)), "gravity")
    assert upsample(small).n_obs == 5 * small.n_obs


def test_logistic_zscore():
    assert logistic_zscore(3.0, 3.0, 2.0) == 0.5
    assert logistic_zscore(5.0, 3.0, 2.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)
    assert logistic_zscore(3.0 - 40.0, 3.0, 2.0) < 1e-6
    with pytest.raises(ValidationError):
        logistic_zscore(1.0, 0.0, 0.0)


@given(st.floats(-1e3, 1e3), st.floats(-100, 100), st.floats(0.1, 50))
def test_logistic_symmetry(x, mean, sd):
    assert logistic_zscore(x, mean, sd) + logistic_zscore(2 * mean - x, mean, sd) == pytest.approx(1.0, abs=1e-12)


def test_design_csv(tmp_path, fixtures):
    des = build_design(load_panel_dir(fixtures / "tiny"), "gravity")
    des.to_csv(tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "pair_id,year,log_pop_origin,log_pop_dest,log_distance,log_flow"
    assert len(lines) == 1 + des.n_obs
