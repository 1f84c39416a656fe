"""Hierarchical gravity and radiation models with a truncated-normal likelihood.

Every pair (i, j) gets its own intercept (and optionally its own slopes) drawn
from a common distribution whose location is anchored at pooled OLS. All
group-level parameters are non-centred: a pair effect is stored as a standard
normal ``z`` and reconstructed as ``location + scale * z``. Scales are sampled
on the log scale, with the Jacobian included in the log density.

The sampler itself sees two unit-Jacobian shifts of these coordinates (the
intercept location is taken at the feature means, and the intercept offsets
absorb the varying slopes' contribution at those means). Draws are mapped
back before anything is summarised, so stored draws are plain non-centred
parameters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from hiermig.classical import OlsFit, UnpooledFits, ols_fit
from hiermig.data import FlowObservation, FlowPanel, PairIndex, Region, distance_matrix
from hiermig.errors import ValidationError
from hiermig.features import (
    GRAVITY,
    RADIATION,
    DesignMatrix,
    feature_columns,
    intervening_matrix,
    upsample,
)
from hiermig.sampler import SamplerConfig, SamplerOutput, TargetDensity, diagnostics, nuts_sample

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# Phi(-10) ~ 7.6e-24
TRUNCATION_CUTOFF = 10.0

INTERCEPT_ONLY = "intercept_only"
ALL_PARAMETERS = "all_parameters"
POOLED = "pooled"

# expected slope signs of the original power-law forms
EXPECTED_SIGNS = {
    GRAVITY: (1, 1, -1),
    RADIATION: (1, 1, -1, -1),
}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    variation: str
    # feature columns held common across pairs even when slopes vary
    common: tuple[str, ...] = ()

    def __post_init__(self):
        cols = feature_columns(self.family)
        if self.variation not in (INTERCEPT_ONLY, ALL_PARAMETERS, POOLED):
            raise ValidationError(f"unknown variation {self.variation!r}")
        bad = [c for c in self.common if c not in cols]
        if bad:
            raise ValidationError(f"common columns {bad} not in {self.family} features")

    @property
    def columns(self) -> tuple[str, ...]:
        return feature_columns(self.family)

    @property
    def varying(self) -> tuple[bool, ...]:
        """Per slope, whether it varies by pair."""
        if self.variation != ALL_PARAMETERS:
            return tuple(False for _ in self.columns)
        return tuple(c not in self.common for c in self.columns)

    @property
    def name(self) -> str:
        for key, spec in MODEL_SPECS.items():
            if spec == self:
                return key
        tag = {INTERCEPT_ONLY: "1", ALL_PARAMETERS: "2", POOLED: "0"}[self.variation]
        return f"h{self.family[0]}{tag}"


MODEL_SPECS = {
    "hg1": ModelSpec(GRAVITY, INTERCEPT_ONLY),
    "hg2": ModelSpec(GRAVITY, ALL_PARAMETERS, common=("log_distance",)),
    "hr1": ModelSpec(RADIATION, INTERCEPT_ONLY),
    "hr2": ModelSpec(RADIATION, ALL_PARAMETERS),
}
POOLED_SPECS = {
    "gravity": ModelSpec(GRAVITY, POOLED),
    "radiation": ModelSpec(RADIATION, POOLED),
}


def get_spec(name: str) -> ModelSpec:
    key = name.lower()
    if key in MODEL_SPECS:
        return MODEL_SPECS[key]
    if key in POOLED_SPECS:
        return POOLED_SPECS[key]
    raise ValidationError(f"unknown model {name!r}; expected one of {sorted(MODEL_SPECS) + sorted(POOLED_SPECS)}")


def count_parameters(spec: ModelSpec, n_regions: int) -> int:
    """Intercepts and slopes entering the predictive mean."""
    if n_regions < 2:
        raise ValidationError("n_regions must be >= 2")
    k = len(spec.columns)
    if spec.variation == POOLED:
        return 1 + k
    n_pairs = n_regions * (n_regions - 1)
    n_varying = 1 + sum(spec.varying)
    return n_pairs * n_varying + (k - sum(spec.varying))


@dataclass
class HyperParams:
    alpha_loc: float
    beta_loc: np.ndarray
    log_sigma_loc: float
    loc_scale: float = 5.0
    sigma_alpha_scale: float = 2.0
    sigma_beta_scale: float = 2.0
    sigma_loc_scale: float = 1.0
    tau_sigma_scale: float = 1.0

    def __post_init__(self):
        self.beta_loc = np.asarray(self.beta_loc, float)
        for name in ("loc_scale", "sigma_alpha_scale", "sigma_beta_scale", "sigma_loc_scale", "tau_sigma_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @classmethod
    def from_ols(cls, fit: OlsFit, **scales) -> "HyperParams":
        return cls(
            alpha_loc=fit.intercept,
            beta_loc=np.array(fit.slopes, float),
            log_sigma_loc=math.log(fit.sigma),
            **scales,
        )

    def to_dict(self) -> dict:
        return {
            "alpha_loc": self.alpha_loc,
            "beta_loc": self.beta_loc.tolist(),
            "log_sigma_loc": self.log_sigma_loc,
            "loc_scale": self.loc_scale,
            "sigma_alpha_scale": self.sigma_alpha_scale,
            "sigma_beta_scale": self.sigma_beta_scale,
            "sigma_loc_scale": self.sigma_loc_scale,
            "tau_sigma_scale": self.tau_sigma_scale,
        }


class ParameterLayout:
    """Named slices of the flat unconstrained parameter vector."""

    def __init__(self, spec: ModelSpec, n_pairs: int):
        self.spec = spec
        self.n_pairs = n_pairs
        self.slices: dict[str, slice] = {}
        off = 0

        def add(name, size):
            nonlocal off
            self.slices[name] = slice(off, off + size)
            off += size

        add("z_alpha", n_pairs)
        add("mu_alpha", 1)
        add("log_sigma_alpha", 1)
        for k, vary in enumerate(spec.varying):
            if vary:
                add(f"mu_beta[{k}]", 1)
                add(f"log_sigma_beta[{k}]", 1)
                add(f"z_beta[{k}]", n_pairs)
            else:
                add(f"beta[{k}]", 1)
        add("mu_sigma", 1)
        add("log_tau_sigma", 1)
        add("z_sigma", n_pairs)
        self.dim = off

    def __getitem__(self, name) -> slice:
        return self.slices[name]

    def names(self) -> list[str]:
        out = []
        for name, sl in self.slices.items():
            size = sl.stop - sl.start
            out.extend([name] if size == 1 and not name.startswith("z_") else [f"{name}.{p}" for p in range(size)])
        return out

    def predictive_parameter_count(self) -> int:
        """Intercept and slope entries of the reconstructed predictive mean."""
        n = self.n_pairs  # z_alpha -> one intercept per pair
        for k, vary in enumerate(self.spec.varying):
            n += self.n_pairs if vary else 1
        return n


def truncated_normal_logpdf(x, mu, sigma):
    """Log density of a normal truncated to [0, inf); -inf below zero."""
    sigma = np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise ValidationError("sigma must be positive")
    x = np.asarray(x, float)
    mu = np.asarray(mu, float)
    r = (x - mu) / sigma
    out = -0.5 * r * r - LOG_SQRT_2PI - np.log(sigma) - special.log_ndtr(mu / sigma)
    out = np.where(x >= 0, out, -np.inf)
    return float(out) if out.ndim == 0 else out


class HierarchicalTarget(TargetDensity):
    """Log joint density of a hierarchical model for one design matrix."""

    def __init__(self, spec: ModelSpec, design: DesignMatrix, hyper: HyperParams):
        if design.model_form != spec.family:
            raise ValidationError(f"{spec.name} needs a {spec.family} design, got {design.model_form}")
        if spec.variation == POOLED:
            raise ValidationError("pooled specs are fit by OLS, not sampled")
        if len(hyper.beta_loc) != design.n_features:
            raise ValidationError("hyperparameter dimension does not match the design")
        if design.n_obs and (design.pair_id.min() < 0 or design.pair_id.max() >= design.n_pairs):
            raise ValidationError("design pair ids outside the pair index")
        self.spec = spec
        self.hyper = hyper
        self.layout = ParameterLayout(spec, design.n_pairs)
        # column-major copy: each slope touches one contiguous feature vector
        self.Xt = np.ascontiguousarray(design.X.T)
        self.y = design.y.copy()
        self.pid = design.pair_id.copy()
        self.n_pairs = design.n_pairs
        # the sampled "mu_alpha" coordinate is the intercept location at the
        # feature means; this unit-Jacobian shift decorrelates it from the slopes
        self.x_bar = design.X.mean(axis=0) if design.n_obs else np.zeros(design.n_features)
        super().__init__(self.layout.dim, names=self.layout.names())

    def initial_point(self) -> np.ndarray:
        lay, h = self.layout, self.hyper
        q = np.zeros(lay.dim)
        q[lay["mu_alpha"]] = h.alpha_loc + float(np.dot(h.beta_loc, self.x_bar))
        q[lay["log_sigma_alpha"]] = math.log(0.5)
        for k, vary in enumerate(self.spec.varying):
            if vary:
                q[lay[f"mu_beta[{k}]"]] = h.beta_loc[k]
                q[lay[f"log_sigma_beta[{k}]"]] = math.log(0.05)
            else:
                q[lay[f"beta[{k}]"]] = h.beta_loc[k]
        q[lay["mu_sigma"]] = h.log_sigma_loc
        q[lay["log_tau_sigma"]] = math.log(0.2)
        return q

    def log_density_and_gradient(self, q):
        lay, h, P, pid, Xt = self.layout, self.hyper, self.n_pairs, self.pid, self.Xt
        g = np.zeros_like(q)
        lp = 0.0

        zq = q[lay["z_alpha"]]
        mu_a = q[lay["mu_alpha"]][0] - float(self.location_slopes(q) @ self.x_bar)
        ls_a = q[lay["log_sigma_alpha"]][0]
        s_a = math.exp(ls_a)
        # sampled intercept offsets absorb the varying slopes' deviations at the
        # feature means: z_alpha = zq - w / s_a
        w = np.zeros(P)
        varying = []
        for k, vary in enumerate(self.spec.varying):
            if vary:
                zb = q[lay[f"z_beta[{k}]"]]
                mu_b = q[lay[f"mu_beta[{k}]"]][0]
                s_b = math.exp(q[lay[f"log_sigma_beta[{k}]"]][0])
                varying.append((k, zb, mu_b, s_b))
                w += (s_b * self.x_bar[k]) * zb
        za = zq - w / s_a
        mean = (mu_a + s_a * zq - w)[pid]
        for k, vary in enumerate(self.spec.varying):
            if not vary:
                mean = mean + q[lay[f"beta[{k}]"]][0] * Xt[k]
        for k, zb, mu_b, s_b in varying:
            mean = mean + (mu_b + s_b * zb)[pid] * Xt[k]
        zs = q[lay["z_sigma"]]
        mu_s = q[lay["mu_sigma"]][0]
        tau = math.exp(q[lay["log_tau_sigma"]][0])
        log_sig = (mu_s + tau * zs)[pid]
        sig = np.exp(log_sig)

        r = (self.y - mean) / sig
        a = mean / sig
        lp += -0.5 * float(r @ r) - float(log_sig.sum()) - LOG_SQRT_2PI * len(r)
        d_mean = r / sig
        d_logsig = r * r - 1.0
        # truncation terms vanish below double precision once a > TRUNCATION_CUTOFF
        near = a < TRUNCATION_CUTOFF
        if near.any():
            an = a[near]
            log_cdf = special.log_ndtr(an)
            lam = np.exp(-0.5 * an * an - LOG_SQRT_2PI - log_cdf)
            lp -= float(np.sum(log_cdf))
            d_mean[near] -= lam / sig[near]
            d_logsig[near] += lam * an

        # intercepts
        g_alpha = np.bincount(pid, d_mean, minlength=P)
        g[lay["z_alpha"]] = g_alpha * s_a - za
        g[lay["mu_alpha"]] = g_alpha.sum() - (mu_a - h.alpha_loc) / h.loc_scale**2
        g[lay["log_sigma_alpha"]] = (
            s_a * float(g_alpha @ zq) - float(za @ w) / s_a - (s_a / h.sigma_alpha_scale) ** 2 + 1.0
        )
        lp += -0.5 * float(za @ za) - 0.5 * ((mu_a - h.alpha_loc) / h.loc_scale) ** 2
        lp += -0.5 * (s_a / h.sigma_alpha_scale) ** 2 + ls_a

        # slopes
        for k, vary in enumerate(self.spec.varying):
            if vary:
                continue
            b = q[lay[f"beta[{k}]"]][0]
            g[lay[f"beta[{k}]"]] = float(d_mean @ Xt[k]) - (b - h.beta_loc[k]) / h.loc_scale**2
            lp += -0.5 * ((b - h.beta_loc[k]) / h.loc_scale) ** 2
        for k, zb, mu_b, s_b in varying:
            # direct effect plus the path through the intercept offsets
            g_beta = np.bincount(pid, d_mean * Xt[k], minlength=P)
            g_eff = g_beta - self.x_bar[k] * g_alpha + (self.x_bar[k] / s_a) * za
            g[lay[f"z_beta[{k}]"]] = g_eff * s_b - zb
            g[lay[f"mu_beta[{k}]"]] = g_beta.sum() - (mu_b - h.beta_loc[k]) / h.loc_scale**2
            g[lay[f"log_sigma_beta[{k}]"]] = s_b * float(g_eff @ zb) - (s_b / h.sigma_beta_scale) ** 2 + 1.0
            lp += -0.5 * float(zb @ zb) - 0.5 * ((mu_b - h.beta_loc[k]) / h.loc_scale) ** 2
            lp += -0.5 * (s_b / h.sigma_beta_scale) ** 2 + math.log(s_b)

        # residual scales
        g_ls = np.bincount(pid, d_logsig, minlength=P)
        g[lay["z_sigma"]] = g_ls * tau - zs
        g[lay["mu_sigma"]] = g_ls.sum() - (mu_s - h.log_sigma_loc) / h.sigma_loc_scale**2
        g[lay["log_tau_sigma"]] = tau * float(g_ls @ zs) - (tau / h.tau_sigma_scale) ** 2 + 1.0
        lp += -0.5 * float(zs @ zs) - 0.5 * ((mu_s - h.log_sigma_loc) / h.sigma_loc_scale) ** 2
        lp += -0.5 * (tau / h.tau_sigma_scale) ** 2 + math.log(tau)

        # chain rule through the intercept shift
        d_mu_a = g[lay["mu_alpha"]][0]
        for k, vary in enumerate(self.spec.varying):
            g[lay[f"mu_beta[{k}]" if vary else f"beta[{k}]"]] -= self.x_bar[k] * d_mu_a

        if not math.isfinite(lp):
            lp = -math.inf
        return lp, g

    def location_slopes(self, q) -> np.ndarray:
        """Group-level slope locations (``mu_beta`` or common ``beta``) from a flat vector."""
        lay = self.layout
        return np.stack(
            [q[..., lay[f"mu_beta[{k}]" if vary else f"beta[{k}]"]][..., 0] for k, vary in enumerate(self.spec.varying)],
            axis=-1,
        )

    def to_model_coordinates(self, draws: np.ndarray) -> np.ndarray:
        """Undo the sampling shifts: ``mu_alpha`` becomes the intercept at zero
        features and ``z_alpha`` the plain standardised intercept offsets."""
        lay = self.layout
        out = np.array(draws, float, copy=True)
        out[..., lay["mu_alpha"]] -= (self.location_slopes(out) @ self.x_bar)[..., None]
        s_a = np.exp(out[..., lay["log_sigma_alpha"]])
        for k, vary in enumerate(self.spec.varying):
            if vary:
                s_b = np.exp(out[..., lay[f"log_sigma_beta[{k}]"]])
                out[..., lay["z_alpha"]] -= (s_b * self.x_bar[k] / s_a) * out[..., lay[f"z_beta[{k}]"]]
        return out


def build_target(spec: ModelSpec, design: DesignMatrix, hyper: HyperParams | None = None) -> HierarchicalTarget:
    if hyper is None:
        hyper = HyperParams.from_ols(ols_fit(design))
    return HierarchicalTarget(spec, design, hyper)


def reconstruct(layout: ParameterLayout, draws: np.ndarray) -> dict[str, np.ndarray]:
    """Centred parameters per draw from flat non-centred draws of shape ``(S, dim)``.

    Returns ``alpha (S, P)``, ``beta (S, P, K)``, ``sigma (S, P)`` and the
    group-level ``mu_alpha``, ``sigma_alpha``, ``mu_beta (S, K)``, ``sigma_beta (S, K)``.
    """
    spec, P = layout.spec, layout.n_pairs
    S = draws.shape[0]
    K = len(spec.columns)
    mu_a = draws[:, layout["mu_alpha"]]
    s_a = np.exp(draws[:, layout["log_sigma_alpha"]])
    alpha = mu_a + s_a * draws[:, layout["z_alpha"]]
    beta = np.empty((S, P, K))
    mu_beta = np.empty((S, K))
    sigma_beta = np.zeros((S, K))
    for k, vary in enumerate(spec.varying):
        if vary:
            mu = draws[:, layout[f"mu_beta[{k}]"]]
            sb = np.exp(draws[:, layout[f"log_sigma_beta[{k}]"]])
            beta[:, :, k] = mu + sb * draws[:, layout[f"z_beta[{k}]"]]
            mu_beta[:, k] = mu[:, 0]
            sigma_beta[:, k] = sb[:, 0]
        else:
            b = draws[:, layout[f"beta[{k}]"]]
            beta[:, :, k] = b
            mu_beta[:, k] = b[:, 0]
    tau = np.exp(draws[:, layout["log_tau_sigma"]])
    sigma = np.exp(draws[:, layout["mu_sigma"]] + tau * draws[:, layout["z_sigma"]])
    return {
        "alpha": alpha,
        "beta": beta,
        "sigma": sigma,
        "mu_alpha": mu_a[:, 0],
        "sigma_alpha": s_a[:, 0],
        "mu_beta": mu_beta,
        "sigma_beta": sigma_beta,
        "mu_sigma": draws[:, layout["mu_sigma"]][:, 0],
        "tau_sigma": tau[:, 0],
    }


def _interval(x, level, axis=0):
    lo, hi = np.quantile(x, [0.5 - level / 2, 0.5 + level / 2], axis=axis)
    return lo, hi


@dataclass
class PosteriorFit:
    spec: ModelSpec
    columns: tuple[str, ...]
    n_pairs: int
    pairs_seen: np.ndarray  # bool (P,)
    alpha_mean: np.ndarray
    alpha_lo: np.ndarray
    alpha_hi: np.ndarray
    beta_mean: np.ndarray  # (P, K)
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    sigma_mean: np.ndarray
    globals_: dict[str, dict]  # name -> {"mean", "lo", "hi"} (vectors for per-slope entries)
    warmup_divergence_fraction: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    ci_level: float = 0.90
    output: SamplerOutput | None = None
    layout: ParameterLayout | None = None

    @property
    def mu_alpha(self) -> float:
        return float(self.globals_["mu_alpha"]["mean"])

    @property
    def mu_beta(self) -> np.ndarray:
        return np.asarray(self.globals_["mu_beta"]["mean"], float)

    def to_dict(self) -> dict:
        def lst(a):
            return np.asarray(a, float).tolist()

        return {
            "model": self.spec.name,
            "family": self.spec.family,
            "variation": self.spec.variation,
            "common": list(self.spec.common),
            "columns": list(self.columns),
            "n_pairs": self.n_pairs,
            "pairs_seen": np.asarray(self.pairs_seen, bool).astype(int).tolist(),
            "ci_level": self.ci_level,
            "alpha": {"mean": lst(self.alpha_mean), "lo": lst(self.alpha_lo), "hi": lst(self.alpha_hi)},
            "beta": {"mean": lst(self.beta_mean), "lo": lst(self.beta_lo), "hi": lst(self.beta_hi)},
            "sigma_mean": lst(self.sigma_mean),
            "globals": {k: {kk: (lst(vv) if np.ndim(vv) else float(vv)) for kk, vv in v.items()} for k, v in self.globals_.items()},
            "warmup_divergence_fraction": self.warmup_divergence_fraction,
            "diagnostics": self.diagnostics,
            "config": self.config,
            "hyper": self.hyper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorFit":
        spec = ModelSpec(d["family"], d["variation"], tuple(d.get("common", ())))
        return cls(
            spec=spec,
            columns=tuple(d["columns"]),
            n_pairs=int(d["n_pairs"]),
            pairs_seen=np.array(d["pairs_seen"], bool),
            alpha_mean=np.array(d["alpha"]["mean"]),
            alpha_lo=np.array(d["alpha"]["lo"]),
            alpha_hi=np.array(d["alpha"]["hi"]),
            beta_mean=np.array(d["beta"]["mean"]).reshape(int(d["n_pairs"]), -1),
            beta_lo=np.array(d["beta"]["lo"]).reshape(int(d["n_pairs"]), -1),
            beta_hi=np.array(d["beta"]["hi"]).reshape(int(d["n_pairs"]), -1),
            sigma_mean=np.array(d["sigma_mean"]),
            globals_={k: {kk: np.array(vv) if isinstance(vv, list) else vv for kk, vv in v.items()} for k, v in d["globals"].items()},
            warmup_divergence_fraction=float(d.get("warmup_divergence_fraction", 0.0)),
            diagnostics=d.get("diagnostics", {}),
            config=d.get("config", {}),
            hyper=d.get("hyper", {}),
            ci_level=float(d.get("ci_level", 0.90)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_pair_csv(self, path, pair_index: PairIndex | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "origin", "dest", "seen", "alpha_mean", *[f"beta_mean.{c}" for c in self.columns], "sigma_mean"])
            for p in range(self.n_pairs):
                o, dd = pair_index.ids(p) if pair_index is not None else ("", "")
                w.writerow([p, o, dd, int(self.pairs_seen[p]), repr(float(self.alpha_mean[p])),
                            *map(repr, self.beta_mean[p].tolist()), repr(float(self.sigma_mean[p]))])


def summarize_posterior(spec, layout, output, design, level=0.90, config=None, hyper=None) -> PosteriorFit:
    draws = output.draws.reshape(-1, output.draws.shape[2])
    c = reconstruct(layout, draws)
    a_lo, a_hi = _interval(c["alpha"], level)
    b_lo, b_hi = _interval(c["beta"], level)
    glob = {}
    for name in ("mu_alpha", "sigma_alpha", "mu_beta", "sigma_beta", "mu_sigma", "tau_sigma"):
        lo, hi = _interval(c[name], level)
        glob[name] = {"mean": c[name].mean(axis=0), "lo": lo, "hi": hi}
    seen = np.zeros(layout.n_pairs, bool)
    seen[np.unique(design.pair_id)] = True
    diag = diagnostics(output)
    summary = {k: diag[k] for k in ("warmup_divergence_fraction", "sampling_divergence_fraction",
                                    "n_warmup_divergent", "n_divergent", "mean_accept_stat",
                                    "max_tree_depth_reached", "step_size")}
    if diag.get("rhat") is not None:
        summary["max_rhat"] = diag["max_rhat"]
        summary["min_ess_bulk"] = diag["min_ess_bulk"]
    return PosteriorFit(
        spec=spec,
        columns=tuple(design.columns),
        n_pairs=layout.n_pairs,
        pairs_seen=seen,
        alpha_mean=c["alpha"].mean(axis=0),
        alpha_lo=a_lo,
        alpha_hi=a_hi,
        beta_mean=c["beta"].mean(axis=0),
        beta_lo=b_lo,
        beta_hi=b_hi,
        sigma_mean=c["sigma"].mean(axis=0),
        globals_=glob,
        warmup_divergence_fraction=output.warmup_divergence_fraction(),
        diagnostics=summary,
        config=dict(config or {}),
        hyper=hyper.to_dict() if hyper is not None else {},
        ci_level=level,
        output=output,
        layout=layout,
    )


def fit_model(
    spec: ModelSpec,
    design: DesignMatrix,
    hyper: HyperParams | None = None,
    config: SamplerConfig | None = None,
    upsample_rows: bool = False,
    ci_level: float = 0.90,
) -> PosteriorFit:
    """Sample a hierarchical model with NUTS and summarise its pair-level effects.

    Hyperparameter anchors default to pooled OLS on the same (un-upsampled) design.
    """
    config = config or SamplerConfig()
    if hyper is None:
        hyper = HyperParams.from_ols(ols_fit(design))
    fit_design = upsample(design) if upsample_rows else design
    target = build_target(spec, fit_design, hyper)
    output = nuts_sample(target, config, target.initial_point())
    output.draws = target.to_model_coordinates(output.draws)
    cfg = config.to_dict()
    cfg["upsample"] = bool(upsample_rows)
    return summarize_posterior(spec, target.layout, output, design, ci_level, cfg, hyper)


def posterior_predict(fit: PosteriorFit, design: DesignMatrix) -> np.ndarray:
    """Predicted flows from posterior-mean intercepts and slopes.

    Pairs without training rows fall back to the group-level means.
    """
    if tuple(design.columns) != tuple(fit.columns):
        raise ValidationError(f"design columns {design.columns} do not match fit columns {fit.columns}")
    if design.n_pairs != fit.n_pairs:
        raise ValidationError("design and fit use different pair indices")
    pid = design.pair_id
    seen = fit.pairs_seen[pid]
    alpha = np.where(seen, fit.alpha_mean[pid], fit.mu_alpha)
    beta = np.where(seen[:, None], fit.beta_mean[pid], fit.mu_beta[None, :])
    return np.exp(alpha + np.sum(beta * design.X, axis=1))


def sign_agreement(fit_or_unpooled, family: str | None = None) -> dict[str, float]:
    """Percent of pairs whose slope interval lies entirely on the expected side of zero.

    Accepts a :class:`PosteriorFit`, :class:`UnpooledFits`, or a dict with
    ``lower``/``upper`` arrays of shape ``(pairs, K)``. NaN intervals are
    skipped; a coefficient with no intervals reports NaN.
    """
    if isinstance(fit_or_unpooled, PosteriorFit):
        seen = fit_or_unpooled.pairs_seen
        lower, upper = fit_or_unpooled.beta_lo[seen], fit_or_unpooled.beta_hi[seen]
        family = family or fit_or_unpooled.spec.family
        cols = fit_or_unpooled.columns
    elif isinstance(fit_or_unpooled, UnpooledFits):
        iv = fit_or_unpooled.intervals()
        lower, upper = iv["lower"], iv["upper"]
        cols = feature_columns(family)
    else:
        lower = np.asarray(fit_or_unpooled["lower"], float)
        upper = np.asarray(fit_or_unpooled["upper"], float)
        cols = feature_columns(family) if family else tuple(f"beta_{k + 1}" for k in range(lower.shape[1]))
    signs = EXPECTED_SIGNS[family] if family else (1,) * lower.shape[1]
    out = {}
    for k, name in enumerate(cols):
        lo, hi = lower[:, k], upper[:, k]
        ok = np.isfinite(lo) & np.isfinite(hi)
        if not ok.any():
            out[name] = float("nan")
            continue
        if signs[k] > 0:
            agree = lo[ok] > 0
        else:
            agree = hi[ok] < 0
        out[name] = 100.0 * float(agree.mean())
    return out


# --- synthetic panels --------------------------------------------------------


@dataclass
class SimulationTruth:
    family: str = GRAVITY
    mu_alpha: float = -9.2
    sigma_alpha: float = 1.0
    beta: tuple[float, ...] = (0.8, 0.7, -0.9)
    sigma_beta: tuple[float, ...] = (0.0, 0.0, 0.0)
    sigma: float = 0.3
    tau_sigma: float = 0.0

    def __post_init__(self):
        k = len(feature_columns(self.family))
        if len(self.beta) != k or len(self.sigma_beta) != k:
            raise ValidationError(f"{self.family} truth needs {k} slopes")
        if self.sigma_alpha < 0 or min(self.sigma_beta) < 0 or self.sigma <= 0 or self.tau_sigma < 0:
            raise ValidationError("truth scales must be nonnegative (residual sigma positive)")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "mu_alpha": self.mu_alpha,
            "sigma_alpha": self.sigma_alpha,
            "beta": list(self.beta),
            "sigma_beta": list(self.sigma_beta),
            "sigma": self.sigma,
            "tau_sigma": self.tau_sigma,
        }


@dataclass
class GroundTruth:
    truth: SimulationTruth
    alpha: np.ndarray  # (P,)
    beta: np.ndarray  # (P, K)
    sigma: np.ndarray  # (P,)
    obs_mean: np.ndarray  # per observation, panel order
    obs_log_flow: np.ndarray
    seed: int
    homogeneous: bool

    def to_dict(self) -> dict:
        return {
            "truth": self.truth.to_dict(),
            "seed": self.seed,
            "homogeneous_pairs": self.homogeneous,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
        }


def sample_truncated_normal(mu, sigma, rng) -> np.ndarray:
    mu = np.asarray(mu, float)
    sigma = np.broadcast_to(np.asarray(sigma, float), mu.shape)
    return stats.truncnorm.rvs((0.0 - mu) / sigma, np.inf, loc=mu, scale=sigma, random_state=rng)


def simulate_panel(
    truth: SimulationTruth | None = None,
    n_regions: int = 20,
    years=range(2005, 2020),
    seed: int = 0,
) -> tuple[FlowPanel, GroundTruth]:
    """Synthetic panel drawn from the hierarchical generative model.

    Regions are scattered over a continental-US-sized box, populations drift
    as noisy geometric growth, pair parameters come from the hierarchy and
    log flows are truncated-normal. CIs are degenerate (``lo == hi``).
    """
    truth = truth or SimulationTruth()
    if n_regions < 3:
        raise ValidationError("n_regions must be >= 3")
    years = list(years)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    n, T = n_regions, len(years)
    lat = rng.uniform(25.0, 49.0, n)
    lon = rng.uniform(-124.0, -67.0, n)
    area = np.exp(rng.uniform(np.log(1e3), np.log(2.7e5), n))
    regions = [
        Region(id=f"R{k:02d}", name=f"Region {k:02d}", capital_lat=float(lat[k]), capital_lon=float(lon[k]), land_area=float(area[k]))
        for k in range(n)
    ]
    log_p0 = rng.uniform(np.log(5e5), np.log(2e7), n)
    growth = rng.uniform(-0.005, 0.02, n)
    steps = growth[:, None] + 0.01 * rng.standard_normal((n, T))
    steps[:, 0] = 0.0
    log_pop = log_p0[:, None] + np.cumsum(steps, axis=1)
    pop = np.exp(log_pop)

    housing = rng.uniform(50.0, 300.0, n)[:, None] * np.exp(np.cumsum(0.03 * rng.standard_normal((n, T)), axis=1))
    disaster = np.exp(rng.normal(0.0, 1.0, (n, T)))

    pairs = PairIndex([r.id for r in regions])
    P = len(pairs)
    K = len(truth.beta)
    alpha = truth.mu_alpha + truth.sigma_alpha * rng.standard_normal(P)
    beta = np.asarray(truth.beta)[None, :] + np.asarray(truth.sigma_beta)[None, :] * rng.standard_normal((P, K))
    sigma = truth.sigma * np.exp(truth.tau_sigma * rng.standard_normal(P))

    d = distance_matrix(regions)
    s = intervening_matrix(d, pop) if truth.family == RADIATION else None
    ii, jj = np.array(pairs.pairs()).T
    observations, means, logs = [], [], []
    mus = np.empty((P, T))
    for t in range(T):
        p_i, p_j = pop[ii, t], pop[jj, t]
        if truth.family == GRAVITY:
            x = np.column_stack([np.log(p_i), np.log(p_j), np.log(d[ii, jj])])
        else:
            st = s[ii, jj, t]
            x = np.column_stack([np.log(p_i), np.log(p_j), np.log(p_i + st), np.log(p_i + p_j + st)])
        mus[:, t] = alpha + np.sum(beta * x, axis=1)
    ys = sample_truncated_normal(mus, sigma[:, None], rng)
    for p in range(P):
        o, dd = pairs.ids(p)
        for t, year in enumerate(years):
            m = float(np.exp(ys[p, t]))
            observations.append(FlowObservation(o, dd, int(year), m, m))
            means.append(mus[p, t])
            logs.append(ys[p, t])
    populations = {(regions[a].id, int(y)): float(pop[a, t]) for a in range(n) for t, y in enumerate(years)}
    covariates = {
        (regions[a].id, int(y)): {"housing_index_pct": float(housing[a, t]), "disaster_cost_busd": float(disaster[a, t])}
        for a in range(n)
        for t, y in enumerate(years)
    }
    panel = FlowPanel(regions=regions, observations=observations, populations=populations, covariates=covariates)
    gt = GroundTruth(
        truth=truth,
        alpha=alpha,
        beta=beta,
        sigma=sigma,
        obs_mean=np.array(means),
        obs_log_flow=np.array(logs),
        seed=int(seed),
        homogeneous=truth.sigma_alpha == 0 and max(truth.sigma_beta) == 0,
    )
    return panel, gt
