"""Out-of-sample flow metrics and their aggregation over sampled paths."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from hiermig.errors import ValidationError

METRICS = ("mae", "r2", "cpc", "cpc_d")
BIN_WIDTH_KM = 2.0


def _pair(observed, predicted):
    o = np.asarray(observed, float).ravel()
    p = np.asarray(predicted, float).ravel()
    if o.shape != p.shape:
        raise ValidationError(f"length mismatch: {o.size} observed vs {p.size} predicted")
    if o.size == 0:
        raise ValidationError("empty flow vectors")
    return o, p


def mae(observed, predicted) -> float:
    o, p = _pair(observed, predicted)
    return float(np.mean(np.abs(o - p)))


def r2(observed, predicted) -> float:
    """Coefficient of determination in level space; negative when worse than the mean."""
    o, p = _pair(observed, predicted)
    sst = float(np.sum((o - o.mean()) ** 2))
    if sst == 0:
        raise ValidationError("observed flows are constant; R^2 undefined")
    return 1.0 - float(np.sum((o - p) ** 2)) / sst


def cpc(observed, predicted) -> float:
    """Common part of commuters: twice the shared flow over the total flow."""
    o, p = _pair(observed, predicted)
    if np.any(o < 0) or np.any(p < 0):
        raise ValidationError("CPC needs nonnegative flows")
    total = float(o.sum() + p.sum())
    if total == 0:
        raise ValidationError("CPC undefined when both totals are zero")
    return 2.0 * float(np.minimum(o, p).sum()) / total


def distance_bins(distance_km) -> np.ndarray:
    """1-based bin k covering [2k - 2, 2k) km."""
    d = np.asarray(distance_km, float)
    if np.any(d <= 0):
        raise ValidationError("distances must be positive")
    return np.floor(d / BIN_WIDTH_KM).astype(np.int64) + 1


def cpc_d(observed, predicted, distance_km, predicted_distance_km=None) -> float:
    """CPC over flow-weighted histograms of trip distance in 2 km bins."""
    o, p = _pair(observed, predicted)
    bo = distance_bins(distance_km)
    bp = bo if predicted_distance_km is None else distance_bins(predicted_distance_km)
    if bo.shape != o.shape or bp.shape != p.shape:
        raise ValidationError("distance vectors must match flow vectors")
    size = int(max(bo.max(), bp.max())) + 1
    n_obs = np.bincount(bo, weights=o, minlength=size)
    n_pred = np.bincount(bp, weights=p, minlength=size)
    return cpc(n_obs, n_pred)


def path_metrics(observed, predicted, distance_km) -> dict[str, float]:
    return {
        "mae": mae(observed, predicted),
        "r2": r2(observed, predicted),
        "cpc": cpc(observed, predicted),
        "cpc_d": cpc_d(observed, predicted, distance_km),
    }


@dataclass
class EvalReport:
    model: str
    per_path: dict[int, dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    half_width: dict[str, float] = field(default_factory=dict)
    band: str = "normal"

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "band": self.band,
            "per_path": {str(k): v for k, v in sorted(self.per_path.items())},
            "mean": self.mean,
            "half_width": self.half_width,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def aggregate(values, band: str = "normal") -> tuple[float, float]:
    """Mean and 95% half-width across paths.

    ``normal`` uses 1.96 sd / sqrt(n); ``percentile`` uses half the 2.5-97.5%
    range of the per-path values.
    """
    v = np.asarray(values, float)
    mean = float(v.mean())
    if v.size < 2:
        return mean, 0.0
    if band == "normal":
        return mean, float(1.96 * v.std(ddof=1) / math.sqrt(v.size))
    if band == "percentile":
        lo, hi = np.percentile(v, [2.5, 97.5])
        return mean, float((hi - lo) / 2.0)
    raise ValidationError(f"unknown band {band!r}")


def evaluate(predictions: dict, observed: dict, model: str = "", band: str = "normal") -> EvalReport:
    """Metrics per path and across paths.

    ``observed[path_id]`` is ``(flows, distances_km)``; ``predictions[path_id]``
    is the predicted flow vector aligned with it.
    """
    if set(predictions) != set(observed):
        raise ValidationError(f"path mismatch: predicted {sorted(predictions)} vs observed {sorted(observed)}")
    per_path = {}
    for pid in sorted(observed):
        flows, dist = observed[pid]
        per_path[pid] = path_metrics(flows, predictions[pid], dist)
    report = EvalReport(model=model, per_path=per_path, band=band)
    for m in METRICS:
        report.mean[m], report.half_width[m] = aggregate([per_path[p][m] for p in per_path], band)
    return report


def _fmt(metric, mean, hw):
    if metric == "mae":
        return f"{mean:,.0f} ± {hw:,.0f}"
    return f"{mean:.3f} ± {hw:.3f}"


def markdown_table(reports) -> str:
    lines = ["| MODEL | MAE | R² | CPC | CPC_D |", "|---|---|---|---|---|"]
    for rep in reports:
        cells = [_fmt(m, rep.mean[m], rep.half_width[m]) for m in METRICS]
        lines.append(f"| {rep.model} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
