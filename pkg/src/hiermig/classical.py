"""Pooled and per-pair ordinary least squares for the log-linear flow models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from hiermig.errors import ValidationError
from hiermig.features import DesignMatrix

INTERCEPT = "intercept"
_RANK_TOL = 1e-8


@dataclass
class OlsFit:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    sigma: float
    r2: float
    n_obs: int
    model_form: str = ""
    # names with no estimate because they were collinear with earlier columns
    unidentified: tuple[str, ...] = field(default=())

    @property
    def df_resid(self) -> int:
        return self.n_obs - int(np.isfinite(self.coef).sum())

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coef[1:]

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def ci(self, level: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tailed t intervals; NaN for unidentified coefficients."""
        q = stats.t.ppf(0.5 + level / 2.0, self.df_resid)
        return self.coef - q * self.se, self.coef + q * self.se

    def to_dict(self) -> dict:
        return {
            "model_form": self.model_form,
            "names": list(self.names),
            "coef": [_num(v) for v in self.coef],
            "se": [_num(v) for v in self.se],
            "sigma": self.sigma,
            "r2": self.r2,
            "n_obs": self.n_obs,
            "unidentified": list(self.unidentified),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OlsFit":
        return cls(
            names=tuple(d["names"]),
            coef=np.array([np.nan if v is None else v for v in d["coef"]], float),
            se=np.array([np.nan if v is None else v for v in d["se"]], float),
            sigma=float(d["sigma"]),
            r2=float(d["r2"]),
            n_obs=int(d["n_obs"]),
            model_form=d.get("model_form", ""),
            unidentified=tuple(d.get("unidentified", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


@dataclass(frozen=True)
class InsufficientData:
    """Marker for a pair without enough rows to leave residual degrees of freedom."""

    n_obs: int
    n_params: int


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _solve_full_rank(A, y):
    q, r = np.linalg.qr(A, mode="reduced")
    coef = linalg.solve_triangular(r, q.T @ y)
    resid = y - A @ coef
    n, p = A.shape
    rss = float(resid @ resid)
    sigma2 = rss / (n - p)
    r_inv = linalg.solve_triangular(r, np.eye(p))
    cov_diag = np.sum(r_inv**2, axis=1) * sigma2
    return coef, np.sqrt(cov_diag), rss, sigma2


def _r2(y, rss):
    sst = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - rss / sst if sst > 0 else float("nan")


def ols(A: np.ndarray, y: np.ndarray, names) -> OlsFit:
    """Least squares for a design that already includes the intercept column."""
    names = tuple(names)
    n, p = A.shape
    if n <= p:
        raise ValidationError(f"need more observations ({n}) than parameters ({p})")
    # rank check by pivoted QR; columns past the numerical rank are collinear
    _, r, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > _RANK_TOL * diag[0])) if diag.size else 0
    if rank < p:
        bad = [names[k] for k in piv[rank:]]
        raise ValidationError(f"design is rank deficient; collinear columns: {bad}")
    coef, se, rss, sigma2 = _solve_full_rank(A, y)
    return OlsFit(names=names, coef=coef, se=se, sigma=float(np.sqrt(sigma2)), r2=_r2(y, rss), n_obs=n)


def ols_fit(design: DesignMatrix) -> OlsFit:
    """Pooled OLS of log flow on the design's log-features plus an intercept."""
    fit = ols(_with_intercept(design.X), design.y, (INTERCEPT, *design.columns))
    fit.model_form = design.model_form
    return fit


def _independent_columns(A: np.ndarray) -> list[int]:
    """Greedy left-to-right selection of linearly independent columns."""
    keep: list[int] = []
    basis = np.zeros((A.shape[0], 0))
    for k in range(A.shape[1]):
        col = A[:, k]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        resid = col - basis @ (basis.T @ col) if basis.shape[1] else col
        rn = np.linalg.norm(resid)
        if rn > _RANK_TOL * norm:
            keep.append(k)
            basis = np.column_stack([basis, resid / rn])
    return keep


def _group_rows(pair_id: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(pair_id, kind="stable")
    ids, starts = np.unique(pair_id[order], return_index=True)
    bounds = np.r_[starts, len(order)]
    return {int(pid): order[bounds[k] : bounds[k + 1]] for k, pid in enumerate(ids)}


class UnpooledFits(dict):
    """``pair_id -> OlsFit | InsufficientData`` plus the interval level used for reporting."""

    def __init__(self, *args, ci_level: float = 0.90, **kwargs):
        super().__init__(*args, **kwargs)
        self.ci_level = ci_level

    def intervals(self) -> dict[str, np.ndarray]:
        return unpooled_intervals(self, self.ci_level)

    @property
    def n_fitted(self) -> int:
        return sum(isinstance(f, OlsFit) for f in self.values())


def unpooled_fit(design: DesignMatrix, pair_index=None, ci_level: float = 0.90) -> UnpooledFits:
    """Independent OLS per pair.

    Columns that are constant (or otherwise collinear) within a pair, such as
    log distance, cannot be separated from the pair's own intercept; they are
    reported as unidentified (NaN) rather than failing the whole pair. Pairs
    with fewer than ``K + 2`` rows get an :class:`InsufficientData` marker.
    """
    names = (INTERCEPT, *design.columns)
    p = len(names)
    out = UnpooledFits(ci_level=ci_level)
    groups = _group_rows(design.pair_id)
    if pair_index is not None:
        for pid in range(len(pair_index)):
            groups.setdefault(pid, np.zeros(0, dtype=np.int64))
    for pid in sorted(groups):
        rows = groups[pid]
        if len(rows) < p + 1:
            out[pid] = InsufficientData(n_obs=len(rows), n_params=p)
            continue
        A = _with_intercept(design.X[rows])
        y = design.y[rows]
        keep = _independent_columns(A)
        coef = np.full(p, np.nan)
        se = np.full(p, np.nan)
        c, s, rss, sigma2 = _solve_full_rank(A[:, keep], y)
        coef[keep] = c
        se[keep] = s
        out[pid] = OlsFit(
            names=names,
            coef=coef,
            se=se,
            sigma=float(np.sqrt(sigma2)),
            r2=_r2(y, rss),
            n_obs=len(rows),
            model_form=design.model_form,
            unidentified=tuple(names[k] for k in range(p) if k not in keep),
        )
    return out


def unpooled_intervals(fits: dict, ci_level: float = 0.90) -> dict[str, np.ndarray]:
    """Stack per-pair slope intervals as ``{"lower": (P, K), "upper": (P, K)}``.

    Pairs without a fit are omitted; unidentified coefficients are NaN.
    """
    lows, highs = [], []
    for pid in sorted(fits):
        fit = fits[pid]
        if isinstance(fit, InsufficientData):
            continue
        lo, hi = fit.ci(ci_level)
        lows.append(lo[1:])
        highs.append(hi[1:])
    k = None
    for fit in fits.values():
        if isinstance(fit, OlsFit):
            k = len(fit.names) - 1
            break
    empty = np.zeros((0, k or 0))
    return {
        "lower": np.array(lows) if lows else empty,
        "upper": np.array(highs) if highs else empty,
    }


def predict_classical(fit: OlsFit, design: DesignMatrix) -> np.ndarray:
    """Predicted flows in persons: exp of the fitted log-linear mean."""
    if tuple(fit.names[1:]) != tuple(design.columns):
        raise ValidationError(f"fit columns {fit.names[1:]} do not match design columns {design.columns}")
    return np.exp(fit.intercept + design.X @ fit.slopes)
