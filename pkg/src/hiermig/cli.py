"""Command-line pipeline: simulate, fit, evaluate, cluster, report.

Every artifact embeds the resolved run configuration and seed. Wall-clock
times are written to separate ``*.timing.json`` files so that fit payloads
are byte-identical across reruns with the same seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hiermig.analysis import LINKAGES, agglomerative_cluster, conditional_covariate_report, pair_vectors
from hiermig.bayes import (
    MODEL_SPECS,
    POOLED_SPECS,
    PosteriorFit,
    SimulationTruth,
    fit_model,
    posterior_predict,
    simulate_panel,
)
from hiermig.classical import OlsFit, ols_fit, predict_classical
from hiermig.data import load_panel_dir, sample_flow_paths, write_panel
from hiermig.errors import NumericalError, ValidationError
from hiermig.features import build_design
from hiermig.metrics import evaluate, markdown_table
from hiermig.sampler import SamplerConfig

MODELS = tuple(POOLED_SPECS) + tuple(MODEL_SPECS)


def parse_years(text) -> tuple[int, ...]:
    """``"2005-2016"``, ``"2005,2007"`` or a mix of both."""
    if isinstance(text, (list, tuple)):
        return tuple(int(y) for y in text)
    years: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValidationError(f"empty year range {part!r}")
            years.extend(range(lo, hi + 1))
        else:
            years.append(int(part))
    if not years:
        raise ValidationError(f"no years in {text!r}")
    return tuple(sorted(set(years)))


def parse_models(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        names = [str(m).lower() for m in text]
    else:
        names = [m.strip().lower() for m in str(text).split(",") if m.strip()]
    bad = [m for m in names if m not in MODELS]
    if bad:
        raise ValidationError(f"unknown models {bad}; choose from {list(MODELS)}")
    return tuple(dict.fromkeys(names))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "runs"
    models: tuple[str, ...] = ("gravity", "radiation", "hg1", "hr1")
    train_years: tuple[int, ...] = tuple(range(2005, 2017))
    test_years: tuple[int, ...] = tuple(range(2017, 2020))
    n_paths: int = 5
    seed: int = 0
    workers: int = 1
    upsample: bool = False
    n_warmup: int = 250
    n_draws: int = 1000
    n_chains: int = 4
    target_accept: float = 0.8
    max_tree_depth: int = 10
    k: int = 2
    linkage: str = "average"
    covariates: tuple[str, ...] = ("housing_index_pct", "land_area", "disaster_cost_busd")
    n_bins: int = 10
    binning: str = "quantile"
    band: str = "normal"
    cluster_model: str = ""
    # simulate only
    n_regions: int = 20
    sigma_alpha: float = 1.0
    residual_sigma: float = 0.3
    family: str = "gravity"

    _CONVERTERS = {
        "models": parse_models,
        "train_years": parse_years,
        "test_years": parse_years,
        "covariates": lambda t: tuple(c.strip() for c in t.split(",") if c.strip()) if isinstance(t, str) else tuple(t),
        "upsample": _bool,
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if set(self.train_years) & set(self.test_years):
            raise ValidationError(f"train and test years overlap: {sorted(set(self.train_years) & set(self.test_years))}")
        if self.n_paths < 1:
            raise ValidationError("n_paths must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.linkage not in LINKAGES:
            raise ValidationError(f"linkage must be one of {LINKAGES}")
        if self.k < 1:
            raise ValidationError("k must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValidationError(f"unknown config key {key!r}")
            if key in cls._CONVERTERS:
                kwargs[key] = cls._CONVERTERS[key](raw)
            else:
                typ = type(getattr(cls, key)) if hasattr(cls, key) else str
                try:
                    kwargs[key] = typ(raw)
                except ValueError as exc:
                    raise ValidationError(f"config key {key!r}: {exc}") from None
        return cls(**kwargs)

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(
            n_warmup=self.n_warmup,
            n_draws=self.n_draws,
            n_chains=self.n_chains,
            target_accept=self.target_accept,
            max_tree_depth=self.max_tree_depth,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# --- jobs --------------------------------------------------------------------


def job_seed(seed: int, model: str, path_id: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(path_id), zlib.crc32(model.encode())])
    return int(ss.generate_state(1)[0])


def fit_path(out_dir: Path, model: str, path_id: int) -> Path:
    return out_dir / "fits" / f"{model}_path{path_id}.json"


def _designs(panel, family, path, cfg: RunConfig):
    full = build_design(panel, family, path=path)
    return full.years_in(cfg.train_years), full.years_in(cfg.test_years)


def _fit_one(panel, cfg: RunConfig, model: str, path_id: int) -> tuple[dict, float]:
    path = sample_flow_paths(panel, cfg.n_paths, cfg.seed)[path_id]
    family = POOLED_SPECS[model].family if model in POOLED_SPECS else MODEL_SPECS[model].family
    train, _ = _designs(panel, family, path, cfg)
    if train.n_obs == 0:
        raise ValidationError(f"no training rows in years {cfg.train_years[0]}-{cfg.train_years[-1]}")
    seed = job_seed(cfg.seed, model, path_id)
    t0 = time.perf_counter()
    if model in POOLED_SPECS:
        fit = ols_fit(train)
        payload = {"kind": "ols", "fit": fit.to_dict(), "warmup_divergence_fraction": None}
    else:
        pf = fit_model(MODEL_SPECS[model], train, config=cfg.sampler(seed), upsample_rows=cfg.upsample)
        if pf.output is not None and pf.output.divergent.all():
            raise NumericalError(f"{model} path {path_id}: every post-warmup transition diverged")
        payload = {"kind": "posterior", "fit": pf.to_dict(), "warmup_divergence_fraction": pf.warmup_divergence_fraction}
    wall = time.perf_counter() - t0
    payload.update({"model": model, "path_id": path_id, "seed": cfg.seed, "job_seed": seed, "config": cfg.to_dict()})
    return payload, wall


def _run_job(args):
    cfg_dict, model, path_id = args
    cfg = RunConfig.from_mapping(cfg_dict)
    panel = load_panel_dir(cfg.data)
    payload, wall = _fit_one(panel, cfg, model, path_id)
    _write_fit(Path(cfg.out), model, path_id, payload, wall)
    return model, path_id, wall, payload["warmup_divergence_fraction"]


def _fit_line(model, path_id, wall, frac) -> str:
    extra = "" if frac is None else f", warm-up divergences {100 * frac:.1f}%"
    return f"fit {model} path {path_id}: {wall:.1f}s{extra}"


def _write_fit(out: Path, model, path_id, payload, wall) -> Path:
    target = fit_path(out, model, path_id)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    timing = target.with_suffix(".timing.json")
    timing.write_text(json.dumps({"model": model, "path_id": path_id, "wall_seconds": wall}) + "\n", encoding="utf-8")
    return target


def cmd_fit(cfg: RunConfig, log=print) -> list[Path]:
    panel = load_panel_dir(cfg.data)
    jobs = [(m, p) for m in cfg.models for p in range(cfg.n_paths)]
    out = Path(cfg.out)
    written = []
    if cfg.workers > 1 and len(jobs) > 1:
        args = [(cfg.to_dict(), m, p) for m, p in jobs]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for model, path_id, wall, frac in pool.map(_run_job, args):
                log(_fit_line(model, path_id, wall, frac))
                written.append(fit_path(out, model, path_id))
    else:
        for model, path_id in jobs:
            payload, wall = _fit_one(panel, cfg, model, path_id)
            written.append(_write_fit(out, model, path_id, payload, wall))
            log(_fit_line(model, path_id, wall, payload["warmup_divergence_fraction"]))
    return written


def load_fit(out: Path, model: str, path_id: int):
    target = fit_path(out, model, path_id)
    if not target.exists():
        raise ValidationError(f"missing artifact {target}; run `fit --models {model}` with the same --out first")
    payload = json.loads(target.read_text(encoding="utf-8"))
    if payload["kind"] == "ols":
        return OlsFit.from_dict(payload["fit"]), payload
    return PosteriorFit.from_dict(payload["fit"]), payload


def predict(fit, design) -> np.ndarray:
    return predict_classical(fit, design) if isinstance(fit, OlsFit) else posterior_predict(fit, design)


def cmd_evaluate(cfg: RunConfig, log=print) -> list:
    panel = load_panel_dir(cfg.data)
    out = Path(cfg.out)
    paths = sample_flow_paths(panel, cfg.n_paths, cfg.seed)
    reports = []
    for model in cfg.models:
        preds, observed = {}, {}
        for path in paths:
            fit, _ = load_fit(out, model, path.path_id)
            family = fit.model_form if isinstance(fit, OlsFit) else fit.spec.family
            _, test = _designs(panel, family, path, cfg)
            if test.n_obs == 0:
                raise ValidationError(f"no test rows in years {cfg.test_years[0]}-{cfg.test_years[-1]}")
            preds[path.path_id] = predict(fit, test)
            observed[path.path_id] = (test.flow, test.distance_km)
        reports.append(evaluate(preds, observed, model=model.upper(), band=cfg.band))
    ev = out / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    table = markdown_table(reports)
    (ev / "table.md").write_text(table, encoding="utf-8")
    payload = {"config": cfg.to_dict(), "seed": cfg.seed, "reports": [r.to_dict() for r in reports]}
    (ev / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log(table)
    return reports


def cmd_cluster(cfg: RunConfig, log=print):
    panel = load_panel_dir(cfg.data)
    out = Path(cfg.out)
    model = cfg.cluster_model or next((m for m in cfg.models if m in ("hg2", "hr2")), cfg.models[0])
    if model in POOLED_SPECS:
        raise ValidationError(f"{model} is pooled; clustering needs a fit of hg2 or hr2")
    fit, _ = load_fit(out, model, 0)
    vectors = pair_vectors(fit)
    dendro, labels = agglomerative_cluster(vectors, linkage=cfg.linkage, k=cfg.k)
    path = sample_flow_paths(panel, cfg.n_paths, cfg.seed)[0]
    train, _ = _designs(panel, fit.spec.family, path, cfg)
    report = conditional_covariate_report(
        dendro, labels, panel, covariates=cfg.covariates, n_bins=cfg.n_bins, binning=cfg.binning, design=train
    )
    cl = out / "cluster"
    cl.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload.update({"model": model, "config": cfg.to_dict(), "seed": cfg.seed})
    (cl / "cluster_report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    report.write_plot_data(cl)
    for note in report.notices:
        log(f"notice: {note}")
    for name, r in report.tests.items():
        log(f"{name}: chi2 = {r.statistic:.3f}, df = {r.df}, p = {r.p_value:.4g}")
    return report


def cmd_simulate(cfg: RunConfig, log=print) -> dict:
    beta = (0.8, 0.7, -0.9) if cfg.family == "gravity" else (0.8, 0.7, -0.5, -0.4)
    truth = SimulationTruth(
        family=cfg.family,
        sigma_alpha=cfg.sigma_alpha,
        beta=beta,
        sigma_beta=(0.0,) * len(beta),
        sigma=cfg.residual_sigma,
    )
    years = sorted(set(cfg.train_years) | set(cfg.test_years))
    if years != list(range(years[0], years[-1] + 1)):
        raise ValidationError("simulated years must be contiguous")
    panel, gt = simulate_panel(truth, n_regions=cfg.n_regions, years=years, seed=cfg.seed)
    paths = write_panel(panel, cfg.data)
    truth_path = Path(cfg.data) / "truth.json"
    payload = gt.to_dict()
    payload.update({"config": cfg.to_dict(), "seed": cfg.seed})
    truth_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log(f"wrote {len(panel.observations)} flow rows for {len(panel.regions)} regions to {cfg.data}")
    return {**paths, "truth": truth_path}


def cmd_report(cfg: RunConfig, log=print) -> Path:
    """Collect evaluation and diagnostics into one Markdown summary."""
    out = Path(cfg.out)
    table_path = out / "eval" / "table.md"
    if not table_path.exists():
        raise ValidationError(f"missing artifact {table_path}; run `evaluate` first")
    lines = ["# Run summary", "", f"seed: {cfg.seed}", "", table_path.read_text(encoding="utf-8"), "## Sampler", ""]
    lines.append("| MODEL | PATH | WARM-UP DIVERGENT % | SAMPLING DIVERGENT | MAX R-HAT | WALL s |")
    lines.append("|---|---|---|---|---|---|")
    for model in cfg.models:
        if model in POOLED_SPECS:
            continue
        for p in range(cfg.n_paths):
            _, payload = load_fit(out, model, p)
            diag = payload["fit"]["diagnostics"]
            timing = fit_path(out, model, p).with_suffix(".timing.json")
            wall = json.loads(timing.read_text())["wall_seconds"] if timing.exists() else float("nan")
            rhat = diag.get("max_rhat", float("nan"))
            lines.append(
                f"| {model.upper()} | {p} | {100 * payload['warmup_divergence_fraction']:.1f} | "
                f"{diag.get('n_divergent', 0)} | {rhat:.3f} | {wall:.1f} |"
            )
    cluster = out / "cluster" / "cluster_report.json"
    if cluster.exists():
        rep = json.loads(cluster.read_text())
        lines += ["", "## Clusters", "", f"sizes: {rep['cluster_sizes']}", ""]
        for name, r in sorted(rep["covariates"].items()):
            lines.append(f"- {name}: chi2 {r['statistic']:.3f}, df {r['df']}, p {r['p']:.4g}")
    target = out / "report.md"
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log(f"wrote {target}")
    return target


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "cluster": cmd_cluster,
    "report": cmd_report,
}

# flag -> RunConfig field
FLAGS = {
    "data": "data",
    "out": "out",
    "models": "models",
    "paths": "n_paths",
    "seed": "seed",
    "workers": "workers",
    "train_years": "train_years",
    "test_years": "test_years",
    "warmup": "n_warmup",
    "draws": "n_draws",
    "chains": "n_chains",
    "k": "k",
    "linkage": "linkage",
    "covariates": "covariates",
    "n_regions": "n_regions",
    "sigma_alpha": "sigma_alpha",
    "family": "family",
    "band": "band",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermig", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--data", help="directory with regions/flows/populations[/covariates].csv")
        p.add_argument("--out", help="output directory for fits and reports")
        p.add_argument("--models", help=f"comma list from {','.join(MODELS)}")
        p.add_argument("--paths", type=int, help="number of sampled flow paths")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="concurrent model x path jobs")
        p.add_argument("--upsample", action="store_true", default=None, help="5x row replication, at most 60 rows per pair")
        p.add_argument("--train-years", dest="train_years", help="e.g. 2005-2016")
        p.add_argument("--test-years", dest="test_years", help="e.g. 2017-2019")
        p.add_argument("--warmup", type=int)
        p.add_argument("--draws", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--k", type=int, help="clusters to cut")
        p.add_argument("--linkage", choices=LINKAGES)
        p.add_argument("--covariates", help="comma list of covariate names")
        p.add_argument("--band", choices=("normal", "percentile"))
        if name == "simulate":
            p.add_argument("--n-regions", dest="n_regions", type=int)
            p.add_argument("--sigma-alpha", dest="sigma_alpha", type=float, help="0 gives homogeneous pairs")
            p.add_argument("--family", choices=("gravity", "radiation"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = read_config_file(args.config) if args.config else {}
    for flag, key in FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.upsample:
        values["upsample"] = True
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
