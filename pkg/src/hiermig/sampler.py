"""No-U-Turn sampling with step-size and diagonal metric adaptation.

The transition is multinomial NUTS: trajectories double in a random direction
until the generalised no-U-turn criterion fails (checked across every subtree
merge, including the extra checks spanning the merge boundary), and the
returned state is drawn from the trajectory with weights exp(-H).
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from hiermig.errors import NumericalError, ValidationError

DIVERGENCE_THRESHOLD = 1000.0


class TargetDensity:
    """Log density with analytic gradient over an unconstrained vector.

    Subclasses override :meth:`log_density_and_gradient`, or pass a callable
    returning ``(logp, grad)``. Instances must be pure so chains may share them.
    """

    def __init__(self, dim: int, logp_and_grad=None, names=None):
        self.dim = int(dim)
        self._fn = logp_and_grad
        self.names = list(names) if names is not None else [f"x[{k}]" for k in range(self.dim)]

    def log_density_and_gradient(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        if self._fn is None:
            raise NotImplementedError
        lp, g = self._fn(q)
        return float(lp), np.asarray(g, float)

    def log_density(self, q) -> float:
        return self.log_density_and_gradient(np.asarray(q, float))[0]

    def gradient(self, q) -> np.ndarray:
        return self.log_density_and_gradient(np.asarray(q, float))[1]


@dataclass
class SamplerConfig:
    n_warmup: int = 250
    n_draws: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    n_chains: int = 4
    init_jitter: float = 0.1
    n_workers: int = 1

    def __post_init__(self):
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.n_warmup < 0 or self.n_draws < 1 or self.n_chains < 1 or self.max_tree_depth < 1:
            raise ValidationError("sampler counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SamplerOutput:
    draws: np.ndarray  # (chains, draws, dim)
    divergent_warmup: np.ndarray  # (chains, n_warmup) bool
    divergent: np.ndarray  # (chains, n_draws) bool
    step_size: np.ndarray  # (chains,)
    inv_mass: np.ndarray  # (chains, dim)
    accept_stat: np.ndarray  # (chains, n_draws)
    tree_depth: np.ndarray  # (chains, n_draws)
    n_leapfrog: np.ndarray  # (chains, n_draws)
    tree_depth_warmup: np.ndarray = field(default=None)
    names: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def warmup_divergence_fraction(self) -> float:
        if self.divergent_warmup.size == 0:
            return 0.0
        return float(self.divergent_warmup.mean())

    def sampling_divergence_fraction(self) -> float:
        return float(self.divergent.mean())


# --- integrator --------------------------------------------------------------


def hamiltonian(logp: float, p: np.ndarray, inv_mass: np.ndarray) -> float:
    # a diverging trajectory may overflow the kinetic term; inf is the intended result
    with np.errstate(over="ignore", invalid="ignore"):
        return -logp + 0.5 * float(p @ (inv_mass * p))


def leapfrog(position, momentum, step_size, n_steps, target, inv_mass=None):
    """``n_steps`` leapfrog steps; returns ``(position, momentum)``.

    Non-finite densities or gradients are not raised: the returned arrays
    carry the non-finite values so callers can flag a divergence.
    """
    q = np.array(position, float)
    p = np.array(momentum, float)
    if n_steps == 0:
        return q, p
    if not step_size > 0:
        raise ValidationError("step_size must be positive")
    inv_mass = np.ones_like(q) if inv_mass is None else np.asarray(inv_mass, float)
    _, g = target.log_density_and_gradient(q)
    for _ in range(int(n_steps)):
        p = p + 0.5 * step_size * g
        q = q + step_size * inv_mass * p
        _, g = target.log_density_and_gradient(q)
        p = p + 0.5 * step_size * g
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            break
    return q, p


class _State:
    __slots__ = ("q", "p", "logp", "grad")

    def __init__(self, q, p, logp, grad):
        self.q, self.p, self.logp, self.grad = q, p, logp, grad


def _step(state: _State, eps: float, inv_mass, target) -> _State:
    p = state.p + 0.5 * eps * state.grad
    q = state.q + eps * inv_mass * p
    with np.errstate(all="ignore"):
        logp, g = target.log_density_and_gradient(q)
        p = p + 0.5 * eps * g
    return _State(q, p, logp, g)


# --- NUTS tree ---------------------------------------------------------------


class _Tree:
    """A trajectory segment stored in time order (left = earliest)."""

    __slots__ = (
        "left", "right", "proposal", "rho", "p_sharp_left", "p_sharp_right",
        "log_w", "sum_accept", "n_leapfrog", "valid", "divergent", "depth_reached",
    )


def _uturn_ok(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0


def _merge_ok(a: _Tree, b: _Tree, rho) -> bool:
    """No-U-turn checks for adjacent segments ``a`` (earlier) and ``b`` (later)."""
    if not _uturn_ok(a.p_sharp_left, b.p_sharp_right, rho):
        return False
    if not _uturn_ok(a.p_sharp_left, b.p_sharp_left, a.rho + b.left.p):
        return False
    return _uturn_ok(a.p_sharp_right, b.p_sharp_right, b.rho + a.right.p)


def _leaf(state: _State, direction, eps, inv_mass, target, h0) -> _Tree:
    new = _step(state, direction * eps, inv_mass, target)
    t = _Tree()
    t.n_leapfrog = 1
    h = hamiltonian(new.logp, new.p, inv_mass) if np.isfinite(new.logp) else math.inf
    if not math.isfinite(h):
        h = math.inf
    t.divergent = (h - h0) > DIVERGENCE_THRESHOLD
    t.valid = not t.divergent
    t.log_w = h0 - h
    t.sum_accept = math.exp(min(0.0, h0 - h)) if math.isfinite(h) else 0.0
    t.left = t.right = t.proposal = new
    t.rho = new.p.copy()
    t.p_sharp_left = t.p_sharp_right = inv_mass * new.p
    return t


def _build(state: _State, depth, direction, eps, inv_mass, target, h0, rng) -> _Tree:
    if depth == 0:
        return _leaf(state, direction, eps, inv_mass, target, h0)
    first = _build(state, depth - 1, direction, eps, inv_mass, target, h0, rng)
    if not first.valid:
        return first
    edge = first.right if direction > 0 else first.left
    second = _build(edge, depth - 1, direction, eps, inv_mass, target, h0, rng)
    out = _Tree()
    out.n_leapfrog = first.n_leapfrog + second.n_leapfrog
    out.sum_accept = first.sum_accept + second.sum_accept
    out.divergent = second.divergent
    if not second.valid:
        out.valid = False
        out.log_w = -math.inf
        return out
    log_w = np.logaddexp(first.log_w, second.log_w)
    # uniform multinomial choice within a subtree
    if math.log(rng.uniform()) < second.log_w - log_w:
        out.proposal = second.proposal
    else:
        out.proposal = first.proposal
    out.log_w = float(log_w)
    a, b = (first, second) if direction > 0 else (second, first)
    out.left, out.right = a.left, b.right
    out.p_sharp_left, out.p_sharp_right = a.p_sharp_left, b.p_sharp_right
    out.rho = a.rho + b.rho
    out.valid = _merge_ok(a, b, out.rho)
    return out


def nuts_transition(q, logp, grad, eps, inv_mass, target, rng, max_depth):
    """One NUTS transition from ``q``.

    Returns ``(q, logp, grad, accept_stat, depth, n_leapfrog, divergent)``.
    """
    p0 = rng.standard_normal(q.shape[0]) / np.sqrt(inv_mass)
    start = _State(q, p0, logp, grad)
    h0 = hamiltonian(logp, p0, inv_mass)

    tree = _Tree()
    tree.left = tree.right = tree.proposal = start
    tree.rho = p0.copy()
    tree.p_sharp_left = tree.p_sharp_right = inv_mass * p0
    tree.log_w = 0.0

    proposal = start
    depth = 0
    n_leapfrog = 0
    sum_accept = 0.0
    divergent = False
    while depth < max_depth:
        direction = 1 if rng.uniform() > 0.5 else -1
        edge = tree.right if direction > 0 else tree.left
        sub = _build(edge, depth, direction, eps, inv_mass, target, h0, rng)
        n_leapfrog += sub.n_leapfrog
        sum_accept += sub.sum_accept
        if not sub.valid:
            divergent = bool(sub.divergent)
            break
        depth += 1
        # biased progressive sampling across the doubling
        if sub.log_w > tree.log_w or math.log(rng.uniform()) < sub.log_w - tree.log_w:
            proposal = sub.proposal
        a, b = (tree, sub) if direction > 0 else (sub, tree)
        merged = _Tree()
        merged.left, merged.right = a.left, b.right
        merged.p_sharp_left, merged.p_sharp_right = a.p_sharp_left, b.p_sharp_right
        merged.rho = a.rho + b.rho
        merged.log_w = float(np.logaddexp(tree.log_w, sub.log_w))
        ok = _merge_ok(a, b, merged.rho)
        tree = merged
        if not ok:
            break
    accept = sum_accept / max(n_leapfrog, 1)
    return proposal.q, proposal.logp, proposal.grad, accept, depth, n_leapfrog, divergent


# --- adaptation --------------------------------------------------------------


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def adaptation_windows(n_warmup: int, init_frac=0.15, term_frac=0.10, base_window=25):
    """End points (exclusive) of the metric-estimation windows.

    The first ``init_frac`` of warm-up adapts step size only, the last
    ``term_frac`` likewise; the middle is split into doubling windows whose
    last member absorbs the remainder. Returns ``(start, [window ends])``.
    """
    if n_warmup < 20:
        return n_warmup, []
    init = int(round(init_frac * n_warmup))
    term = int(round(term_frac * n_warmup))
    slow_end = n_warmup - term
    ends = []
    start = init
    size = min(base_window, slow_end - init)
    while start < slow_end:
        end = start + size
        # stretch the last window when the next doubled one would not fit
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start = end
        size *= 2
    return init, ends


def _find_initial_step(q, logp, grad, inv_mass, target, rng, eps=1.0):
    p = rng.standard_normal(q.shape[0]) / np.sqrt(inv_mass)
    h0 = hamiltonian(logp, p, inv_mass)
    state = _State(q, p, logp, grad)

    def delta(e):
        new = _step(state, e, inv_mass, target)
        if not np.isfinite(new.logp):
            return -math.inf
        return h0 - hamiltonian(new.logp, new.p, inv_mass)

    d = delta(eps)
    direction = 1 if d > math.log(0.8) else -1
    for _ in range(100):
        if direction == 1:
            eps *= 2.0
        else:
            eps *= 0.5
        d = delta(eps)
        if direction == 1 and not d > math.log(0.8):
            eps *= 0.5
            break
        if direction == -1 and d > math.log(0.8):
            break
        if eps < 1e-12 or eps > 1e7:
            break
    return eps


def _regularized_variance(window: np.ndarray) -> np.ndarray:
    n = window.shape[0]
    var = window.var(axis=0, ddof=1) if n > 1 else np.ones(window.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def run_chain(target, config: SamplerConfig, init, seed_seq) -> dict:
    rng = np.random.default_rng(seed_seq)
    q = np.array(init, float)
    if config.init_jitter:
        q = q + config.init_jitter * rng.uniform(-1.0, 1.0, size=q.shape)
    logp, grad = target.log_density_and_gradient(q)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise NumericalError("log density or gradient is not finite at the initial point")
    dim = q.shape[0]
    inv_mass = np.ones(dim)
    eps = _find_initial_step(q, logp, grad, inv_mass, target, rng)
    da = DualAveraging(eps, config.target_accept)

    n_w = config.n_warmup
    win_start, win_ends = adaptation_windows(n_w)
    div_w = np.zeros(n_w, bool)
    depth_w = np.zeros(n_w, np.int64)
    buffer = []
    ends = set(win_ends)
    for it in range(n_w):
        q, logp, grad, acc, depth, _, div = nuts_transition(
            q, logp, grad, eps, inv_mass, target, rng, config.max_tree_depth
        )
        div_w[it] = div
        depth_w[it] = depth
        eps = da.update(acc)
        if win_ends and win_start <= it < win_ends[-1]:
            buffer.append(q.copy())
            if it + 1 in ends:
                inv_mass = _regularized_variance(np.array(buffer))
                buffer = []
                eps = _find_initial_step(q, logp, grad, inv_mass, target, rng, eps)
                da.restart(eps)
    if n_w:
        eps = da.final
    if not (math.isfinite(eps) and eps > 0):
        raise NumericalError(f"step size adaptation produced {eps}")

    n_d = config.n_draws
    draws = np.empty((n_d, dim))
    div = np.zeros(n_d, bool)
    acc_s = np.empty(n_d)
    depth_s = np.empty(n_d, np.int64)
    nleap = np.empty(n_d, np.int64)
    for it in range(n_d):
        q, logp, grad, acc, depth, nl, dv = nuts_transition(
            q, logp, grad, eps, inv_mass, target, rng, config.max_tree_depth
        )
        draws[it] = q
        div[it] = dv
        acc_s[it] = acc
        depth_s[it] = depth
        nleap[it] = nl
    return {
        "draws": draws,
        "divergent_warmup": div_w,
        "divergent": div,
        "step_size": eps,
        "inv_mass": inv_mass,
        "accept_stat": acc_s,
        "tree_depth": depth_s,
        "n_leapfrog": nleap,
        "tree_depth_warmup": depth_w,
    }


def nuts_sample(target, config: SamplerConfig | None = None, init=None) -> SamplerOutput:
    """Run ``config.n_chains`` independent NUTS chains and stack their output.

    Chain ``c`` draws from the ``c``-th child of ``SeedSequence(config.seed)``,
    so results are reproducible whether chains run in-process or in workers.
    """
    config = config or SamplerConfig()
    init = np.zeros(target.dim) if init is None else np.asarray(init, float)
    if init.shape != (target.dim,):
        raise ValidationError(f"init has shape {init.shape}, expected ({target.dim},)")
    lp0 = target.log_density(init)
    if not np.isfinite(lp0):
        raise NumericalError("log density is not finite at the initial point")
    children = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    if config.n_workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_workers) as ex:
            futures = [ex.submit(run_chain, target, config, init, s) for s in children]
            chains = [f.result() for f in futures]
    else:
        chains = [run_chain(target, config, init, s) for s in children]

    def stack(key):
        return np.stack([c[key] for c in chains])

    return SamplerOutput(
        draws=stack("draws"),
        divergent_warmup=stack("divergent_warmup"),
        divergent=stack("divergent"),
        step_size=np.array([c["step_size"] for c in chains]),
        inv_mass=stack("inv_mass"),
        accept_stat=stack("accept_stat"),
        tree_depth=stack("tree_depth"),
        n_leapfrog=stack("n_leapfrog"),
        tree_depth_warmup=stack("tree_depth_warmup"),
        names=list(getattr(target, "names", [])),
    )


# --- diagnostics -------------------------------------------------------------


def split_rhat(x: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction per coordinate.

    ``x`` has shape ``(chains, draws)`` or ``(chains, draws, dim)``.
    """
    x = np.asarray(x, float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    m, n, _ = x.shape
    half = n // 2
    split = np.concatenate([x[:, :half], x[:, n - half :]], axis=0)
    n = half
    chain_mean = split.mean(axis=1)
    chain_var = split.var(axis=1, ddof=1)
    w = chain_var.mean(axis=0)
    b = n * chain_mean.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / w)
    r = np.where(w > 0, r, np.where(b > 0, np.inf, 1.0))
    return r[0] if squeeze else r


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    return acov


def _ess_1d(chains: np.ndarray) -> float:
    """Geyer initial-monotone-sequence ESS for a ``(m, n)`` array."""
    m, n = chains.shape
    if n < 4:
        return float("nan")
    acov = np.array([_autocovariance(c) for c in chains])
    chain_mean = chains.mean(axis=1)
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = np.empty(n)
    rho[0] = 1.0
    rho[1:] = 1.0 - (w - acov[:, 1:].mean(axis=0)) / var_plus
    # sum consecutive pairs while positive, enforcing monotonicity
    t = 0
    pair_sums = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        if pair_sums and s > pair_sums[-1]:
            s = pair_sums[-1]
        pair_sums.append(s)
        t += 2
    tau = -1.0 + 2.0 * sum(pair_sums)
    tau = max(tau, 1.0 / math.log10(m * n))
    return float(m * n / tau)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    r = stats.rankdata(x.ravel(), method="average").reshape(m, n)
    return stats.norm.ppf((r - 0.375) / (m * n + 0.25))


def bulk_ess(x: np.ndarray) -> np.ndarray:
    """Rank-normalised split-chain ESS per coordinate for ``(chains, draws[, dim])``."""
    x = np.asarray(x, float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    _, n, d = x.shape
    half = n // 2
    out = np.empty(d)
    for k in range(d):
        split = np.concatenate([x[:, :half, k], x[:, n - half :, k]], axis=0)
        out[k] = _ess_1d(_rank_normalize(split))
    return out[0] if squeeze else out


def diagnostics(output: SamplerOutput) -> dict:
    """Divergence fractions per phase plus split R-hat and bulk ESS per coordinate."""
    report = {
        "warmup_divergence_fraction": output.warmup_divergence_fraction(),
        "sampling_divergence_fraction": output.sampling_divergence_fraction(),
        "n_warmup_divergent": int(output.divergent_warmup.sum()),
        "n_divergent": int(output.divergent.sum()),
        "step_size": output.step_size.tolist(),
        "mean_accept_stat": float(output.accept_stat.mean()),
        "max_tree_depth_reached": int(output.tree_depth.max()) if output.tree_depth.size else 0,
    }
    if output.n_chains >= 2:
        rhat = split_rhat(output.draws)
        ess = bulk_ess(output.draws)
        report["rhat"] = rhat.tolist()
        report["ess_bulk"] = ess.tolist()
        report["max_rhat"] = float(np.max(rhat))
        report["min_ess_bulk"] = float(np.min(ess))
    else:
        report["rhat"] = None
        report["ess_bulk"] = None
    return report


def write_draws_csv(output: SamplerOutput, path, names=None) -> None:
    names = list(names or output.names or [f"x[{k}]" for k in range(output.draws.shape[2])])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "draw", "divergent", *names])
        for c in range(output.n_chains):
            for t in range(output.draws.shape[1]):
                w.writerow([c, t, int(output.divergent[c, t]), *map(repr, output.draws[c, t].tolist())])


def write_diagnostics_json(output: SamplerOutput, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(diagnostics(output), fh, indent=2, sort_keys=True)
