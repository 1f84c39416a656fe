"""Log-linear design matrices for the gravity and radiation forms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import special

from hiermig.data import FlowPanel, SampledPath
from hiermig.errors import ValidationError

GRAVITY = "gravity"
RADIATION = "radiation"
MODEL_FORMS = (GRAVITY, RADIATION)

GRAVITY_COLUMNS = ("log_pop_origin", "log_pop_dest", "log_distance")
RADIATION_COLUMNS = (
    "log_pop_origin",
    "log_pop_dest",
    "log_pop_origin_intervening",
    "log_pop_total_intervening",
)


def feature_columns(model_form: str) -> tuple[str, ...]:
    if model_form == GRAVITY:
        return GRAVITY_COLUMNS
    if model_form == RADIATION:
        return RADIATION_COLUMNS
    raise ValidationError(f"unknown model form {model_form!r}; expected one of {MODEL_FORMS}")


@dataclass(frozen=True)
class DesignMatrix:
    """One row per observed (origin, dest, year) with its log-features.

    ``flow`` and ``distance_km`` keep the level-space flow and the pair distance
    alongside the regression inputs so evaluation never has to re-join them.
    """

    X: np.ndarray
    y: np.ndarray
    pair_id: np.ndarray
    year: np.ndarray
    columns: tuple[str, ...]
    model_form: str
    flow: np.ndarray
    distance_km: np.ndarray
    n_pairs: int

    def __post_init__(self):
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ValidationError("design matrix shape does not match its columns")
        for name in ("y", "pair_id", "year", "flow", "distance_km"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"design field {name} has wrong length")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValidationError("design matrix contains non-finite entries")

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "DesignMatrix":
        mask = np.asarray(mask)
        return replace(
            self,
            X=self.X[mask],
            y=self.y[mask],
            pair_id=self.pair_id[mask],
            year=self.year[mask],
            flow=self.flow[mask],
            distance_km=self.distance_km[mask],
        )

    def years_in(self, years) -> "DesignMatrix":
        return self.subset(np.isin(self.year, list(years)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "year", *self.columns, "log_flow"])
            for k in range(self.n_obs):
                w.writerow([int(self.pair_id[k]), int(self.year[k]), *map(repr, self.X[k].tolist()), repr(float(self.y[k]))])


def _population_matrix(panel: FlowPanel, years) -> np.ndarray:
    ids = panel.region_ids
    pop = np.empty((len(ids), len(years)))
    for a, rid in enumerate(ids):
        for b, t in enumerate(years):
            pop[a, b] = panel.population(rid, t)
    return pop


def intervening_population(i: int, j: int, t: int, panel: FlowPanel, distance_matrix=None) -> float:
    """Total population of regions strictly closer to region ``i`` than ``j`` is.

    ``i`` and ``j`` are region positions in ``panel.regions``; ``t`` is a year.
    """
    d = panel.distance_matrix() if distance_matrix is None else np.asarray(distance_matrix)
    ids = panel.region_ids
    total = 0.0
    for k, rid in enumerate(ids):
        if k != i and k != j and d[i, k] < d[i, j]:
            total += panel.population(rid, t)
    return total


def intervening_matrix(distance_matrix: np.ndarray, populations: np.ndarray) -> np.ndarray:
    """S[i, j] for every ordered pair given one population vector.

    ``populations`` may be ``(N,)`` or ``(N, T)``; the result is ``(N, N)`` or ``(N, N, T)``.
    """
    d = np.asarray(distance_matrix, float)
    n = d.shape[0]
    closer = d[:, None, :] < d[:, :, None]  # closer[i, j, k] = D[i,k] < D[i,j]
    eye = np.eye(n, dtype=bool)
    closer &= ~eye[:, None, :]  # k != i
    closer &= ~eye[None, :, :]  # k != j
    return np.tensordot(closer.astype(float), np.asarray(populations, float), axes=([2], [0]))


def build_design(
    panel: FlowPanel,
    model_form: str,
    distance_matrix=None,
    path: SampledPath | None = None,
) -> DesignMatrix:
    """Build the gravity or radiation design for a panel (or one sampled path of it).

    Rows follow the panel's canonical (origin, dest, year) order; observations
    missing from ``path`` (zero draws) are skipped. Without a path the rounded
    CI midpoints are used.
    """
    columns = feature_columns(model_form)
    d = panel.distance_matrix() if distance_matrix is None else np.asarray(distance_matrix, float)
    flows = panel.midpoint_flows() if path is None else path.flows
    ids = panel.region_ids
    pos = {r: k for k, r in enumerate(ids)}
    pairs = panel.pair_index()

    rows = [o for o in panel.observations if o.key in flows]
    n = len(rows)
    oi = np.array([pos[o.origin] for o in rows], dtype=np.int64)
    dj = np.array([pos[o.dest] for o in rows], dtype=np.int64)
    year = np.array([o.year for o in rows], dtype=np.int64)
    flow = np.array([flows[o.key] for o in rows], dtype=float)
    p_i = np.array([panel.population(o.origin, o.year) for o in rows], dtype=float)
    p_j = np.array([panel.population(o.dest, o.year) for o in rows], dtype=float)
    dist = d[oi, dj] if n else np.zeros(0)

    for k, o in enumerate(rows):
        if flow[k] < 1:
            raise ValidationError(f"row {k} ({o.origin}->{o.dest}, {o.year}): flow {flow[k]} < 1 cannot be logged")
        if not p_i[k] > 0 or not p_j[k] > 0:
            raise ValidationError(f"row {k} ({o.origin}->{o.dest}, {o.year}): nonpositive population")
        if not dist[k] > 0:
            raise ValidationError(f"row {k} ({o.origin}->{o.dest}, {o.year}): nonpositive distance {dist[k]}")

    if model_form == GRAVITY:
        X = np.column_stack([np.log(p_i), np.log(p_j), np.log(dist)]) if n else np.zeros((0, 3))
    else:
        s = np.empty(n)
        for t in np.unique(year):
            sel = year == t
            try:
                pop_t = _population_matrix(panel, [int(t)])[:, 0]
            except ValidationError as exc:
                first = int(np.flatnonzero(sel)[0])
                o = rows[first]
                raise ValidationError(
                    f"radiation features for row {first} ({o.origin}->{o.dest}, {o.year}): {exc}"
                ) from None
            s_t = intervening_matrix(d, pop_t)
            s[sel] = s_t[oi[sel], dj[sel]]
        X = (
            np.column_stack([np.log(p_i), np.log(p_j), np.log(p_i + s), np.log(p_i + p_j + s)])
            if n
            else np.zeros((0, 4))
        )
    pair_id = np.array([pairs.index(a, b) for a, b in zip(oi, dj)], dtype=np.int64)
    return DesignMatrix(
        X=X,
        y=np.log(flow),
        pair_id=pair_id,
        year=year,
        columns=columns,
        model_form=model_form,
        flow=flow,
        distance_km=dist,
        n_pairs=len(pairs),
    )


def upsample(design: DesignMatrix, factor: int = 5, cap: int = 60) -> DesignMatrix:
    """Replicate every row ``factor`` times, keeping at most ``cap`` rows per pair."""
    idx = np.repeat(np.arange(design.n_obs), factor)
    order = np.argsort(design.pair_id[idx], kind="stable")
    idx = idx[order]
    pid = design.pair_id[idx]
    # rank of each replicated row within its pair
    start = np.r_[0, np.flatnonzero(np.diff(pid)) + 1]
    counts = np.diff(np.r_[start, len(pid)])
    rank = np.arange(len(pid)) - np.repeat(start, counts)
    return design.subset(idx[rank < cap])


def logistic_zscore(x, mean: float, sd: float):
    """Squash a feature into (0, 1) via the logistic of its z-score."""
    if not sd > 0:
        raise ValidationError(f"sd must be positive, got {sd}")
    z = (np.asarray(x, float) - mean) / sd
    out = special.expit(z)
    return float(out) if np.ndim(out) == 0 else out


def export_design(design: DesignMatrix, path) -> Path:
    path = Path(path)
    design.to_csv(path)
    return path
