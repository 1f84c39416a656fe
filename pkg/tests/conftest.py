import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hiermig.data import FlowObservation, FlowPanel, Region

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def fixtures():
    return FIXTURES


def line_panel(populations, spacing_deg=1.0, years=(2005,), flow=100.0):
    """Regions on the equator at 0, 1, 2, ... degrees of longitude."""
    regions = [
        Region(id=f"L{k}", name=f"L{k}", capital_lat=0.0, capital_lon=k * spacing_deg, land_area=1.0)
        for k in range(len(populations))
    ]
    pops = {(r.id, y): float(p) for r, p in zip(regions, populations) for y in years}
    obs = [
        FlowObservation(a.id, b.id, y, flow, flow)
        for a in regions
        for b in regions
        if a.id != b.id
        for y in years
    ]
    return FlowPanel(regions=regions, observations=obs, populations=pops)


def random_panel(rng, n, years=(2005,)):
    regions = [
        Region(
            id=f"Q{k}",
            name=f"Q{k}",
            capital_lat=float(rng.uniform(-60, 60)),
            capital_lon=float(rng.uniform(-170, 170)),
            land_area=float(rng.uniform(1, 100)),
        )
        for k in range(n)
    ]
    pops = {(r.id, y): float(rng.integers(1, 10_000)) for r in regions for y in years}
    obs = [
        FlowObservation(a.id, b.id, y, 50.0, 50.0)
        for a in regions
        for b in regions
        if a.id != b.id
        for y in years
    ]
    return FlowPanel(regions=regions, observations=obs, populations=pops)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance lines, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed, detail: str) -> None:
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE[number] = f"criterion {number:2d}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
