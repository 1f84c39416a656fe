"""Clustering of pair-level parameter vectors and covariate homogeneity tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from hiermig.errors import ValidationError

LINKAGES = ("average", "complete", "single")


@dataclass(frozen=True)
class PairVector:
    pair_id: int
    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValidationError(f"pair {self.pair_id}: non-finite parameter vector")


def pair_vectors(fit) -> list[PairVector]:
    """Posterior-mean intercept and varying slopes for every pair seen in training.

    Needs a fit whose slopes vary by pair (HG2 / HR2).
    """
    varying = [k for k, v in enumerate(fit.spec.varying) if v]
    if not varying:
        raise ValidationError(
            f"{fit.spec.name} has only pair-varying intercepts; clustering needs a model with "
            "pair-varying coefficients (hg2 or hr2)"
        )
    out = []
    for pid in np.flatnonzero(fit.pairs_seen):
        vec = np.concatenate([[fit.alpha_mean[pid]], fit.beta_mean[pid, varying]])
        out.append(PairVector(pair_id=int(pid), vector=vec))
    return out


def cosine_distance(u, v) -> float:
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("cosine distance undefined for a zero vector")
    c = float(u @ v) / (nu * nv)
    return 1.0 - min(1.0, max(-1.0, c))


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    V = np.asarray(vectors, float)
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise ValidationError("cosine distance undefined for a zero vector")
    U = V / norms[:, None]
    D = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class Dendrogram:
    """Merge history in the usual linkage-matrix convention.

    Row ``s`` merges clusters ``left`` and ``right`` (ids < n are leaves, id
    ``n + s`` is the cluster created at step ``s``) at ``height``.
    """

    merges: np.ndarray  # (n - 1, 4): left, right, height, size
    pair_ids: list[int]
    linkage: str = "average"

    @property
    def n_leaves(self) -> int:
        return len(self.pair_ids)

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.heights) >= -1e-12))

    def cut(self, k: int) -> np.ndarray:
        """Labels 0..k-1 after undoing the last ``k - 1`` merges.

        Labels are numbered by the smallest leaf position in each cluster.
        """
        n = self.n_leaves
        if not 1 <= k <= n:
            raise ValidationError(f"cannot cut {n} leaves into {k} clusters")
        parent = list(range(2 * n - 1))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for s in range(n - k):
            left, right = int(self.merges[s, 0]), int(self.merges[s, 1])
            parent[find(left)] = n + s
            parent[find(right)] = n + s
        roots = [find(a) for a in range(n)]
        relabel: dict[int, int] = {}
        labels = np.empty(n, np.int64)
        for a, r in enumerate(roots):
            labels[a] = relabel.setdefault(r, len(relabel))
        return labels

    def leaf_order(self) -> list[int]:
        n = self.n_leaves
        if n == 1:
            return [0]
        children = {n + s: (int(self.merges[s, 0]), int(self.merges[s, 1])) for s in range(n - 1)}
        order, stack = [], [2 * n - 2]
        while stack:
            node = stack.pop()
            if node < n:
                order.append(node)
            else:
                left, right = children[node]
                stack.extend([right, left])
        return order

    def plot_rows(self) -> list[dict]:
        """Segment coordinates for drawing the dendrogram with leaves at x = 0, 1, ..."""
        n = self.n_leaves
        x = {leaf: float(pos) for pos, leaf in enumerate(self.leaf_order())}
        h = {leaf: 0.0 for leaf in range(n)}
        rows = []
        for s in range(n - 1):
            left, right, height = int(self.merges[s, 0]), int(self.merges[s, 1]), float(self.merges[s, 2])
            node = n + s
            x[node] = 0.5 * (x[left] + x[right])
            h[node] = height
            rows.append({
                "merge": s, "left": left, "right": right, "height": height,
                "x_left": x[left], "x_right": x[right], "x_merge": x[node],
                "height_left": h[left], "height_right": h[right],
            })
        return rows


def agglomerative_cluster(vectors, linkage: str = "average", k: int = 2, distance=None):
    """Bottom-up clustering under cosine distance.

    Each step merges the closest pair of active clusters; exact ties go to
    the lexicographically smallest (smallest-member, smallest-member) pair.
    Cluster distances are updated by the Lance-Williams recurrences.
    Returns ``(Dendrogram, labels)``.
    """
    if linkage not in LINKAGES:
        raise ValidationError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    vectors = list(vectors)
    n = len(vectors)
    if n < k or n == 0:
        raise ValidationError(f"need at least k={k} vectors, got {n}")
    vectors = sorted(vectors, key=lambda pv: pv.pair_id)
    pair_ids = [pv.pair_id for pv in vectors]
    if distance is None:
        D = cosine_distance_matrix(np.array([pv.vector for pv in vectors]))
    else:
        D = np.array(distance, float)
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    active = np.ones(n, bool)
    size = np.ones(n, np.int64)
    node_id = np.arange(n)
    merges = np.zeros((max(n - 1, 0), 4))
    for s in range(n - 1):
        # row/column positions stay ordered by smallest member, so the first
        # minimum in row-major order is the lexicographic tie-break
        masked = np.where(active[:, None] & active[None, :], D, np.inf)
        tri = np.triu(masked, 1)
        tri[np.tril_indices(n)] = np.inf
        flat = int(np.argmin(tri))
        a, b = divmod(flat, n)
        height = float(D[a, b])
        merges[s] = (node_id[a], node_id[b], height, size[a] + size[b])
        if linkage == "average":
            new = (size[a] * D[a] + size[b] * D[b]) / (size[a] + size[b])
        elif linkage == "complete":
            new = np.maximum(D[a], D[b])
        else:
            new = np.minimum(D[a], D[b])
        D[a, :] = new
        D[:, a] = new
        D[a, a] = np.inf
        active[b] = False
        D[b, :] = np.inf
        D[:, b] = np.inf
        size[a] += size[b]
        node_id[a] = n + s
    dendro = Dendrogram(merges=merges, pair_ids=pair_ids, linkage=linkage)
    return dendro, dendro.cut(k)


# --- homogeneity -------------------------------------------------------------


def chi2_sf(statistic: float, df: int) -> float:
    """Chi-square survival via the regularised upper incomplete gamma function."""
    if df <= 0:
        raise ValidationError("df must be positive")
    if statistic <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, statistic / 2.0))


@dataclass
class HomogeneityResult:
    statistic: float
    p_value: float
    df: int
    edges: np.ndarray
    counts_a: np.ndarray
    counts_b: np.ndarray
    binning: str = "quantile"

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p": self.p_value,
            "df": self.df,
            "edges": self.edges.tolist(),
            "counts_a": self.counts_a.astype(int).tolist(),
            "counts_b": self.counts_b.astype(int).tolist(),
            "binning": self.binning,
        }


def _merge_empty(edges, ca, cb):
    """Fold bins with zero pooled count into their right (else left) neighbour."""
    edges, ca, cb = list(edges), list(ca), list(cb)
    k = 0
    while k < len(ca) and len(ca) > 1:
        if ca[k] + cb[k] == 0:
            if k + 1 < len(ca):
                ca[k + 1] += ca[k]
                cb[k + 1] += cb[k]
                del edges[k + 1]
            else:
                ca[k - 1] += ca[k]
                cb[k - 1] += cb[k]
                del edges[k]
            del ca[k], cb[k]
        else:
            k += 1
    return np.array(edges), np.array(ca, float), np.array(cb, float)


def chi_square_homogeneity(sample_a, sample_b, n_bins: int = 10, binning: str = "quantile") -> HomogeneityResult:
    """2 x B contingency test that two samples share one distribution.

    Bin edges come from the pooled sample (quantiles by default, equal width
    with ``binning="width"``); empty pooled bins are merged away and the
    degrees of freedom use the surviving bin count.
    """
    a = np.asarray(sample_a, float).ravel()
    b = np.asarray(sample_b, float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("both samples must be nonempty")
    if n_bins < 2:
        raise ValidationError("n_bins must be >= 2")
    pooled = np.concatenate([a, b])
    if np.ptp(pooled) == 0:
        raise ValidationError("pooled sample is degenerate (all values equal)")
    if binning == "quantile":
        edges = np.quantile(pooled, np.linspace(0.0, 1.0, n_bins + 1))
    elif binning == "width":
        edges = np.linspace(pooled.min(), pooled.max(), n_bins + 1)
    else:
        raise ValidationError(f"unknown binning {binning!r}")
    edges = np.unique(edges)
    inner = edges[1:-1]
    ca = np.bincount(np.searchsorted(inner, a, side="right"), minlength=len(edges) - 1)
    cb = np.bincount(np.searchsorted(inner, b, side="right"), minlength=len(edges) - 1)
    edges, ca, cb = _merge_empty(edges, ca, cb)
    col = ca + cb
    na, nb = ca.sum(), cb.sum()
    total = na + nb
    ea = na * col / total
    eb = nb * col / total
    stat = float(np.sum((ca - ea) ** 2 / ea) + np.sum((cb - eb) ** 2 / eb))
    df = len(col) - 1
    p = chi2_sf(stat, df) if df > 0 else 1.0
    return HomogeneityResult(statistic=stat, p_value=p, df=df, edges=edges, counts_a=ca, counts_b=cb, binning=binning)


# --- reports -----------------------------------------------------------------


@dataclass
class ClusterReport:
    dendrogram: Dendrogram
    labels: np.ndarray
    k: int
    tests: dict[str, HomogeneityResult] = field(default_factory=dict)
    summaries: dict[str, dict] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    pair_names: list[tuple[str, str]] = field(default_factory=list)

    def assignment(self) -> dict[int, int]:
        return {pid: int(lab) for pid, lab in zip(self.dendrogram.pair_ids, self.labels)}

    def to_dict(self) -> dict:
        out = {
            "linkage": self.dendrogram.linkage,
            "k": self.k,
            "merges": self.dendrogram.merges.tolist(),
            "heights_monotone": self.dendrogram.is_monotone(),
            "pair_ids": list(self.dendrogram.pair_ids),
            "assignments": [int(x) for x in self.labels],
            "cluster_sizes": np.bincount(self.labels, minlength=self.k).tolist(),
            "covariates": {name: r.to_dict() for name, r in self.tests.items()},
            "summaries": self.summaries,
            "notices": list(self.notices),
        }
        if self.pair_names:
            out["pairs"] = [list(p) for p in self.pair_names]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_plot_data(self, directory) -> list:
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        rows = self.dendrogram.plot_rows()
        path = directory / "dendrogram.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fields = ["merge", "left", "right", "height", "x_left", "x_right", "x_merge", "height_left", "height_right"]
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        written.append(path)
        path = directory / "histograms.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "bin", "left_edge", "right_edge", "count_cluster0", "count_cluster1"])
            for name, r in self.tests.items():
                for k in range(len(r.counts_a)):
                    w.writerow([name, k, repr(float(r.edges[k])), repr(float(r.edges[k + 1])), int(r.counts_a[k]), int(r.counts_b[k])])
        written.append(path)
        return written


def pair_log_ratios(panel, pair_ids, covariate: str) -> np.ndarray:
    """log(value_i / value_j) per pair, time-varying values averaged over all years.

    ``land_area`` is read from the regions themselves.
    """
    pairs = panel.pair_index()
    ids = panel.region_ids
    if covariate == "land_area":
        values = {r.id: r.land_area for r in panel.regions}
    else:
        acc: dict[str, list[float]] = {r: [] for r in ids}
        for (rid, _year), vals in panel.covariates.items():
            if covariate in vals and rid in acc:
                acc[rid].append(vals[covariate])
        missing = [r for r, v in acc.items() if not v]
        if missing:
            raise ValidationError(f"covariate {covariate!r} missing for regions {missing}")
        values = {r: float(np.mean(v)) for r, v in acc.items()}
    bad = [r for r, v in values.items() if not v > 0]
    if bad:
        raise ValidationError(f"covariate {covariate!r} must be positive to take log ratios; nonpositive for {bad}")
    out = np.empty(len(pair_ids))
    for n, pid in enumerate(pair_ids):
        o, d = pairs.ids(pid)
        out[n] = math.log(values[o] / values[d])
    return out


def _summary(x):
    x = np.asarray(x, float)
    return {"mean": float(x.mean()), "median": float(np.median(x)), "sd": float(x.std()), "n": int(x.size)}


def conditional_covariate_report(
    dendrogram: Dendrogram,
    labels,
    panel,
    covariates=("housing_index_pct", "land_area", "disaster_cost_busd"),
    n_bins: int = 10,
    binning: str = "quantile",
    design=None,
) -> ClusterReport:
    """Per-covariate homogeneity tests between two clusters of pairs.

    With ``design`` given, per-cluster summaries (and tests) of mean log flow,
    log population product and log distance are added.
    """
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    report = ClusterReport(dendrogram=dendrogram, labels=labels, k=k)
    pids = np.asarray(dendrogram.pair_ids)
    pairs = panel.pair_index()
    report.pair_names = [pairs.ids(int(p)) for p in pids]
    ratios = {name: pair_log_ratios(panel, pids, name) for name in covariates}

    extra = {}
    if design is not None:
        flow = np.full(len(pids), np.nan)
        logpop = np.full(len(pids), np.nan)
        logd = np.full(len(pids), np.nan)
        pos = {int(p): n for n, p in enumerate(pids)}
        y_sum = np.bincount(design.pair_id, design.y, minlength=design.n_pairs)
        cnt = np.bincount(design.pair_id, minlength=design.n_pairs)
        pp = np.bincount(design.pair_id, design.X[:, 0] + design.X[:, 1], minlength=design.n_pairs)
        dd = np.bincount(design.pair_id, np.log(design.distance_km), minlength=design.n_pairs)
        for p, n in pos.items():
            if cnt[p]:
                flow[n], logpop[n], logd[n] = y_sum[p] / cnt[p], pp[p] / cnt[p], dd[p] / cnt[p]
        extra = {"mean_log_flow": flow, "log_pop_product": logpop, "log_distance": logd}

    if k < 2:
        report.notices.append("single cluster requested; homogeneity tests skipped")
    for label in range(k):
        report.summaries[str(label)] = {"n_pairs": int(np.sum(labels == label))}
        for name, x in {**extra, **ratios}.items():
            sel = x[(labels == label) & np.isfinite(x)]
            if sel.size:
                report.summaries[str(label)][name] = _summary(sel)
    if k >= 2:
        if k > 2:
            report.notices.append("more than two clusters; tests compare cluster 0 against cluster 1")
        for name, x in {**ratios, **extra}.items():
            a = x[(labels == 0) & np.isfinite(x)]
            b = x[(labels == 1) & np.isfinite(x)]
            report.tests[name] = chi_square_homogeneity(a, b, n_bins=n_bins, binning=binning)
    return report
