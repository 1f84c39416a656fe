"""Region metadata, flow panels with CI bounds, distances and plausible flow paths."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from hiermig.errors import ValidationError

EARTH_RADIUS_KM = 6371.0088
# two-sided 90% Gaussian quantile
Z_90 = 1.6449
DEFAULT_N_PATHS = 5

REGION_COLUMNS = ("id", "name", "capital_lat", "capital_lon", "land_area_sqmi")
FLOW_COLUMNS = ("origin", "dest", "year", "flow_lo", "flow_hi")
POPULATION_COLUMNS = ("id", "year", "population")
COVARIATE_COLUMNS = ("id", "year")


@dataclass(frozen=True)
class Region:
    id: str
    name: str
    capital_lat: float
    capital_lon: float
    land_area: float
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        _check_coordinate(self.capital_lat, self.capital_lon)
        if not self.land_area > 0:
            raise ValidationError(f"region {self.id!r}: land_area must be positive, got {self.land_area}")


@dataclass(frozen=True)
class FlowObservation:
    origin: str
    dest: str
    year: int
    flow_lo: float
    flow_hi: float

    def __post_init__(self):
        if self.origin == self.dest:
            raise ValidationError(f"flow {self.origin}->{self.dest} ({self.year}): origin equals destination")
        if not 0 <= self.flow_lo <= self.flow_hi:
            raise ValidationError(
                f"flow {self.origin}->{self.dest} ({self.year}): need 0 <= flow_lo <= flow_hi, "
                f"got [{self.flow_lo}, {self.flow_hi}]"
            )

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.origin, self.dest, self.year)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.flow_lo + self.flow_hi)


class PairIndex:
    """Dense enumeration of the N(N-1) ordered pairs (i, j), i != j.

    Pairs are indexed lexicographically by region position, so pair ``(i, j)``
    with ``i < j`` gets index ``i*(N-1) + j - 1`` and with ``i > j`` gets
    ``i*(N-1) + j``.
    """

    def __init__(self, region_ids):
        region_ids = list(region_ids)
        if len(set(region_ids)) != len(region_ids):
            dup = sorted({r for r in region_ids if region_ids.count(r) > 1})
            raise ValidationError(f"duplicate region ids: {dup}")
        if len(region_ids) < 2:
            raise ValidationError("need at least 2 regions to form pairs")
        self.region_ids = tuple(region_ids)
        self._pos = {r: k for k, r in enumerate(region_ids)}

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def __len__(self) -> int:
        n = self.n_regions
        return n * (n - 1)

    def index(self, i: int, j: int) -> int:
        n = self.n_regions
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"invalid pair ({i}, {j}) for {n} regions")
        return i * (n - 1) + (j - 1 if j > i else j)

    def pair(self, k: int) -> tuple[int, int]:
        n = self.n_regions
        if not 0 <= k < len(self):
            raise ValidationError(f"pair index {k} out of range")
        i, r = divmod(k, n - 1)
        return i, (r + 1 if r >= i else r)

    def index_of(self, origin: str, dest: str) -> int:
        try:
            return self.index(self._pos[origin], self._pos[dest])
        except KeyError as exc:
            raise ValidationError(f"unknown region id {exc.args[0]!r}") from None

    def ids(self, k: int) -> tuple[str, str]:
        i, j = self.pair(k)
        return self.region_ids[i], self.region_ids[j]

    def pairs(self):
        return [self.pair(k) for k in range(len(self))]


def build_pair_index(regions) -> PairIndex:
    return PairIndex(r.id for r in regions)


@dataclass
class FlowPanel:
    regions: list[Region]
    observations: list[FlowObservation]
    populations: dict[tuple[str, int], float]
    covariates: dict[tuple[str, int], dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate region ids in panel")
        known = set(ids)
        for obs in self.observations:
            for rid in (obs.origin, obs.dest):
                if rid not in known:
                    raise ValidationError(f"flow references unknown region {rid!r}")
                if (rid, obs.year) not in self.populations:
                    raise ValidationError(f"missing population for region {rid!r} in year {obs.year}")
        years = self.years
        if years and years != list(range(years[0], years[-1] + 1)):
            raise ValidationError(f"flow years are not contiguous: {years}")
        pos = {r: k for k, r in enumerate(ids)}
        self.observations = sorted(self.observations, key=lambda o: (pos[o.origin], pos[o.dest], o.year))

    @property
    def region_ids(self) -> list[str]:
        return [r.id for r in self.regions]

    @property
    def years(self) -> list[int]:
        return sorted({o.year for o in self.observations})

    def pair_index(self) -> PairIndex:
        return build_pair_index(self.regions)

    def region(self, rid: str) -> Region:
        for r in self.regions:
            if r.id == rid:
                return r
        raise ValidationError(f"unknown region {rid!r}")

    def population(self, rid: str, year: int) -> float:
        try:
            return self.populations[(rid, year)]
        except KeyError:
            raise ValidationError(f"missing population for region {rid!r} in year {year}") from None

    def distance_matrix(self) -> np.ndarray:
        return distance_matrix(self.regions)

    def midpoint_flows(self) -> dict[tuple[str, str, int], int]:
        """Rounded CI midpoints with zero flows excluded."""
        out = {}
        for obs in self.observations:
            m = int(math.floor(obs.midpoint + 0.5))
            if m > 0:
                out[obs.key] = m
        return out


@dataclass(frozen=True)
class SampledPath:
    path_id: int
    flows: dict[tuple[str, str, int], int]
    seed: int


def _check_coordinate(lat, lon):
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise ValidationError(f"coordinate out of range: ({lat}, {lon})")


def great_circle_km(a, b) -> float:
    """Haversine distance in km between two (lat, lon) points given in degrees."""
    (lat1, lon1), (lat2, lon2) = a, b
    _check_coordinate(lat1, lon1)
    _check_coordinate(lat2, lon2)
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(regions) -> np.ndarray:
    coords = [(r.capital_lat, r.capital_lon) for r in regions]
    n = len(coords)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = great_circle_km(coords[i], coords[j])
    return d


def ci_sigma(flow_lo, flow_hi):
    return (np.asarray(flow_hi, float) - np.asarray(flow_lo, float)) / (2.0 * Z_90)


def _path_rng(seed: int, path_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(path_id)]))


def sample_flow_paths(panel: FlowPanel, n_paths: int = DEFAULT_N_PATHS, seed: int = 0) -> list[SampledPath]:
    """Draw plausible flow counts from each observation's 90% CI.

    Each flow is drawn from a normal centred on the CI midpoint with the
    CI-implied standard deviation, truncated at zero, then rounded. Draws that
    round to zero are dropped from that path.
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    obs = panel.observations
    lo = np.array([o.flow_lo for o in obs], float)
    hi = np.array([o.flow_hi for o in obs], float)
    if np.any(hi < lo):
        raise ValidationError("flow_hi < flow_lo in panel")
    mid = 0.5 * (lo + hi)
    sd = ci_sigma(lo, hi)
    random = sd > 0
    paths = []
    for path_id in range(n_paths):
        rng = _path_rng(seed, path_id)
        draws = mid.copy()
        if random.any():
            a = (0.0 - mid[random]) / sd[random]
            draws[random] = stats.truncnorm.rvs(
                a, np.inf, loc=mid[random], scale=sd[random], random_state=rng
            )
        counts = np.floor(draws + 0.5).astype(np.int64)
        flows = {o.key: int(c) for o, c in zip(obs, counts) if c > 0}
        paths.append(SampledPath(path_id=path_id, flows=flows, seed=int(seed)))
    return paths


# --- CSV loading -----------------------------------------------------------


def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path.name}: missing columns {missing} (header: {header})")
        # data rows start at file line 2
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2)]
    return header, rows


def _num(path, lineno, row, col, kind=float):
    raw = row.get(col)
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        value = float(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"{Path(path).name} row {lineno}: non-numeric {col}={raw!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"{Path(path).name} row {lineno}: non-finite {col}={raw!r}")
    return value


def load_panel(flows_csv, populations_csv, regions_csv, covariates_csv=None) -> FlowPanel:
    """Load and join the four CSV inputs into a validated :class:`FlowPanel`."""
    _, rows = _read_csv(regions_csv, REGION_COLUMNS)
    regions = []
    for lineno, row in rows:
        try:
            regions.append(
                Region(
                    id=row["id"].strip(),
                    name=row["name"],
                    capital_lat=_num(regions_csv, lineno, row, "capital_lat"),
                    capital_lon=_num(regions_csv, lineno, row, "capital_lon"),
                    land_area=_num(regions_csv, lineno, row, "land_area_sqmi"),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{Path(regions_csv).name} row {lineno}: {exc}") from None
    ids = [r.id for r in regions]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{Path(regions_csv).name}: duplicate region ids")
    known = set(ids)

    _, rows = _read_csv(populations_csv, POPULATION_COLUMNS)
    populations = {}
    for lineno, row in rows:
        rid = row["id"].strip()
        year = _num(populations_csv, lineno, row, "year", int)
        pop = _num(populations_csv, lineno, row, "population")
        if pop <= 0:
            raise ValidationError(f"{Path(populations_csv).name} row {lineno}: population must be positive")
        populations[(rid, year)] = pop

    covariates = {}
    if covariates_csv is not None:
        header, rows = _read_csv(covariates_csv, COVARIATE_COLUMNS)
        names = [c for c in header if c not in COVARIATE_COLUMNS]
        for lineno, row in rows:
            rid = row["id"].strip()
            year = _num(covariates_csv, lineno, row, "year", int)
            covariates[(rid, year)] = {c: _num(covariates_csv, lineno, row, c) for c in names}

    _, rows = _read_csv(flows_csv, FLOW_COLUMNS)
    observations = []
    for lineno, row in rows:
        origin, dest = row["origin"].strip(), row["dest"].strip()
        year = _num(flows_csv, lineno, row, "year", int)
        for rid in (origin, dest):
            if rid not in known:
                raise ValidationError(f"{Path(flows_csv).name} row {lineno}: unknown region {rid!r}")
            if (rid, year) not in populations:
                raise ValidationError(
                    f"{Path(flows_csv).name} row {lineno}: missing population for region {rid!r} in year {year}"
                )
        try:
            observations.append(
                FlowObservation(
                    origin, dest, year,
                    _num(flows_csv, lineno, row, "flow_lo"),
                    _num(flows_csv, lineno, row, "flow_hi"),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{Path(flows_csv).name} row {lineno}: {exc}") from None
    keys = [o.key for o in observations]
    if len(set(keys)) != len(keys):
        raise ValidationError(f"{Path(flows_csv).name}: duplicate (origin, dest, year) rows")
    return FlowPanel(regions=regions, observations=observations, populations=populations, covariates=covariates)


def write_panel(panel: FlowPanel, directory) -> dict[str, Path]:
    """Write a panel in the CSV schemas understood by :func:`load_panel`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.csv" for k in ("regions", "flows", "populations", "covariates")}
    with open(paths["regions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REGION_COLUMNS)
        for r in panel.regions:
            w.writerow([r.id, r.name, repr(r.capital_lat), repr(r.capital_lon), repr(r.land_area)])
    with open(paths["flows"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FLOW_COLUMNS)
        for o in panel.observations:
            w.writerow([o.origin, o.dest, o.year, repr(float(o.flow_lo)), repr(float(o.flow_hi))])
    with open(paths["populations"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POPULATION_COLUMNS)
        for (rid, year), pop in sorted(panel.populations.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            w.writerow([rid, year, repr(float(pop))])
    names = sorted({c for v in panel.covariates.values() for c in v})
    with open(paths["covariates"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(COVARIATE_COLUMNS) + names)
        for (rid, year), vals in sorted(panel.covariates.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            w.writerow([rid, year] + [repr(float(vals[c])) for c in names])
    return paths


def load_panel_dir(directory) -> FlowPanel:
    directory = Path(directory)
    cov = directory / "covariates.csv"
    return load_panel(
        directory / "flows.csv",
        directory / "populations.csv",
        directory / "regions.csv",
        cov if cov.exists() else None,
    )
