import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiermig.data import (
    EARTH_RADIUS_KM,
    FlowObservation,
    FlowPanel,
    PairIndex,
    Region,
    build_pair_index,
    ci_sigma,
    great_circle_km,
    load_panel,
    load_panel_dir,
    sample_flow_paths,
    write_panel,
)
from hiermig.errors import ValidationError

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)
point = st.tuples(lat, lon)


def haversine_oracle(a, b):
    # independent form via the chord length of unit vectors
    def unit(p):
        la, lo = np.radians(p)
        return np.array([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)])

    chord = np.linalg.norm(unit(a) - unit(b))
    return 2 * EARTH_RADIUS_KM * np.arcsin(min(1.0, chord / 2))


def _regions(n):
    return [Region(id=f"r{k}", name="", capital_lat=0.0, capital_lon=float(k), land_area=1.0) for k in range(n)]


@pytest.mark.parametrize("n, expected", [(2, 2), (3, 6), (51, 2550)])
def test_pair_counts(n, expected):
    assert len(build_pair_index(_regions(n))) == expected


@given(st.integers(2, 40))
def test_pair_index_round_trip(n):
    idx = PairIndex([f"r{k}" for k in range(n)])
    for k in range(len(idx)):
        i, j = idx.pair(k)
        assert i != j
        assert idx.index(i, j) == k


def test_pair_index_rejects_self_pair_and_duplicates():
    idx = PairIndex(["a", "b", "c"])
    with pytest.raises(ValidationError):
        idx.index(1, 1)
    with pytest.raises(ValidationError, match="duplicate"):
        PairIndex(["a", "b", "a"])
    assert idx.ids(idx.index_of("c", "a")) == ("c", "a")


def test_great_circle_known_values():
    assert great_circle_km((10.0, 20.0), (10.0, 20.0)) == 0.0
    assert great_circle_km((0, 0), (0, 180)) == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=1e-6)
    assert great_circle_km((0, 0), (0, 180)) == pytest.approx(20015.1, abs=0.1)
    a, b = (42.6526, -73.7562), (38.5816, -121.4944)
    assert great_circle_km(a, b) == pytest.approx(haversine_oracle(a, b), abs=0.1)


@given(point, point)
def test_great_circle_symmetric_and_matches_oracle(a, b):
    d = great_circle_km(a, b)
    assert d == great_circle_km(b, a)
    assert d == pytest.approx(haversine_oracle(a, b), abs=1e-3)


@given(point, point, point)
def test_triangle_inequality(a, b, c):
    assert great_circle_km(a, c) <= great_circle_km(a, b) + great_circle_km(b, c) + 1e-6


def test_great_circle_rejects_bad_coordinates():
    with pytest.raises(ValidationError):
        great_circle_km((91, 0), (0, 0))


def _single_obs_panel(lo, hi):
    regions = _regions(2)
    pops = {("r0", 2005): 10.0, ("r1", 2005): 10.0}
    return FlowPanel(regions, [FlowObservation("r0", "r1", 2005, lo, hi)], pops)


def test_zero_width_ci_is_deterministic():
    panel = _single_obs_panel(100, 100)
    for path in sample_flow_paths(panel, n_paths=7, seed=3):
        assert path.flows[("r0", "r1", 2005)] == 100


def test_path_sampling_moments():
    panel = _single_obs_panel(90, 110)
    draws = np.array([p.flows[("r0", "r1", 2005)] for p in sample_flow_paths(panel, n_paths=10_000, seed=1)])
    assert abs(draws.mean() - 100) <= 0.5
    target = 20 / 3.2898
    assert abs(draws.std() - target) <= 0.1 * target


def test_ci_sigma_uses_gaussian_90_quantile():
    assert ci_sigma(90, 110) == pytest.approx(20 / (2 * 1.6449))


def test_paths_are_reproducible_and_positive():
    panel = _single_obs_panel(0, 4)
    a = sample_flow_paths(panel, n_paths=200, seed=9)
    b = sample_flow_paths(panel, n_paths=200, seed=9)
    assert [p.flows for p in a] == [p.flows for p in b]
    assert all(v >= 1 for p in a for v in p.flows.values())
    # draws near zero get dropped on some paths
    assert any(not p.flows for p in a)


def test_load_tiny_fixture(fixtures):
    panel = load_panel_dir(fixtures / "tiny")
    assert len(panel.observations) == 12
    assert panel.years == [2005, 2006]
    assert panel.region("BB").land_area == 30000
    assert panel.covariates[("CC", 2006)]["disaster_cost_busd"] == 3.1
    # the zero-CI observation is excluded from the midpoint flows
    assert ("CC", "AA", 2006) not in panel.midpoint_flows()
    assert panel.midpoint_flows()[("AA", "BB", 2005)] == 1000


def test_missing_population_names_region_and_year(fixtures):
    with pytest.raises(ValidationError, match=r"'CC' in year 2006"):
        load_panel_dir(fixtures / "missing_population")


def test_self_flow_rejected_with_row(fixtures):
    with pytest.raises(ValidationError, match=r"flows.csv row 14: .*origin equals destination"):
        load_panel_dir(fixtures / "self_flow")


def test_bad_number_reports_row(tmp_path, fixtures):
    for name in ("regions", "populations", "covariates"):
        (tmp_path / f"{name}.csv").write_text((fixtures / "tiny" / f"{name}.csv").read_text())
    text = (fixtures / "tiny" / "flows.csv").read_text().replace("300,360", "300,lots")
    (tmp_path / "flows.csv").write_text(text)
    with pytest.raises(ValidationError, match=r"row 5: non-numeric flow_hi='lots'"):
        load_panel_dir(tmp_path)


def test_missing_column(tmp_path, fixtures):
    (tmp_path / "regions.csv").write_text("id,name,capital_lat\nA,a,1\n")
    with pytest.raises(ValidationError, match="missing columns"):
        load_panel(fixtures / "tiny" / "flows.csv", fixtures / "tiny" / "populations.csv", tmp_path / "regions.csv")


def test_write_round_trip(tmp_path, fixtures):
    panel = load_panel_dir(fixtures / "tiny")
    write_panel(panel, tmp_path)
    again = load_panel_dir(tmp_path)
    assert again.observations == panel.observations
    assert again.populations == panel.populations
    assert again.covariates == panel.covariates
    assert again.regions == panel.regions


def test_observation_validation():
    with pytest.raises(ValidationError):
        FlowObservation("a", "b", 2005, 10, 5)
    with pytest.raises(ValidationError):
        Region("a", "", 0.0, 0.0, land_area=0.0)
