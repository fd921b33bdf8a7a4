"""Hamiltonian Monte Carlo with no-U-turn trajectories, written from scratch.

Each chain adapts its step size by dual averaging toward a target acceptance
statistic and its diagonal mass matrix from expanding warmup windows, then
draws with both frozen. Trajectories double until the path turns back on
itself or the leapfrog budget is exhausted; proposals are drawn uniformly
from the slice-admissible points of the trajectory. Chains own independent
generators seeded as seed + chain index and run sequentially, so results are
reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .data_model import atomic_write_text
from .errors import (DivergenceStorm, GradientCheckFailed, InsufficientDraws,
                     InvalidConfig, NonFiniteDensity)
from .posterior import LogPosterior, ParameterLayout, gradient_check

DIVERGENCE_THRESHOLD = 1000.0
DRAWS_FORMAT = "ipsb-draws-1"


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog: int = 1024

    def __post_init__(self):
        if self.chains < 1:
            raise InvalidConfig(f"chains must be >= 1, got {self.chains}")
        if self.warmup < 100:
            raise InvalidConfig(f"warmup must be >= 100, got {self.warmup}")
        if self.samples < 1:
            raise InvalidConfig(f"samples must be >= 1, got {self.samples}")
        if not 0.0 < self.target_accept < 1.0:
            raise InvalidConfig("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 2:
            raise InvalidConfig("max_leapfrog must be >= 2")

    @property
    def max_depth(self):
        return max(1, int(math.log2(self.max_leapfrog)))


@dataclass
class ChainStats:
    divergences: int
    accept_stat: float
    step_size: float
    max_depth_hits: int


@dataclass
class PosteriorDraws:
    """Post-warmup draws for all chains plus convergence diagnostics."""

    draws: np.ndarray  # (chains, samples, dim)
    layout: ParameterLayout | None
    param_names: list
    seed: int
    config: SamplerConfig
    chain_stats: list
    rhat: np.ndarray | None = None
    ess: np.ndarray | None = None
    zero_variance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_samples(self):
        return self.draws.shape[1]

    @property
    def dim(self):
        return self.draws.shape[2]

    @property
    def divergences(self):
        return np.array([s.divergences for s in self.chain_stats])

    def stacked(self) -> np.ndarray:
        """All chains concatenated, chain-major: (chains * samples, dim)."""
        return self.draws.reshape(-1, self.dim)

    def get(self, name) -> np.ndarray:
        """Stacked draws of one named block, shape (n draws, block size)."""
        return self.stacked()[:, getattr(self.layout, name)]


# ---------------------------------------------------------------------------
# NUTS kernel


def _kinetic(r, inv_mass):
    # momenta can overflow right before a divergence; inf is handled upstream
    with np.errstate(over="ignore", invalid="ignore"):
        return 0.5 * float(r @ (inv_mass * r))


def _leapfrog(f, theta, r, grad, eps, inv_mass):
    r1 = r + 0.5 * eps * grad
    theta1 = theta + eps * (inv_mass * r1)
    logp1, grad1 = f(theta1)
    r1 = r1 + 0.5 * eps * grad1
    return theta1, r1, logp1, grad1


def _uturn(theta_minus, theta_plus, r_minus, r_plus, inv_mass):
    dx = theta_plus - theta_minus
    return (dx @ (inv_mass * r_minus)) < 0 or (dx @ (inv_mass * r_plus)) < 0


@dataclass
class _Tree:
    minus: tuple  # (theta, r, logp, grad) at the backward end
    plus: tuple  # forward end
    prop: tuple  # (theta, logp, grad) proposed point
    n_good: int
    stop: bool
    alpha: float
    n_alpha: int
    diverged: bool


def _build_tree(f, point, logu, direction, depth, eps, inv_mass, joint0, rng):
    theta, r, _, grad = point
    if depth == 0:
        theta1, r1, logp1, grad1 = _leapfrog(f, theta, r, grad, direction * eps, inv_mass)
        joint = logp1 - _kinetic(r1, inv_mass)
        diverged = (logu - joint) > DIVERGENCE_THRESHOLD
        end = (theta1, r1, logp1, grad1)
        alpha = 1.0 if joint >= joint0 else math.exp(joint - joint0)
        return _Tree(minus=end, plus=end, prop=(theta1, logp1, grad1),
                     n_good=int(logu <= joint), stop=diverged,
                     alpha=alpha, n_alpha=1, diverged=diverged)

    first = _build_tree(f, point, logu, direction, depth - 1, eps, inv_mass,
                        joint0, rng)
    if first.stop:
        return first
    outer = first.minus if direction == -1 else first.plus
    second = _build_tree(f, outer, logu, direction, depth - 1, eps, inv_mass,
                         joint0, rng)

    minus = second.minus if direction == -1 else first.minus
    plus = first.plus if direction == -1 else second.plus
    n_good = first.n_good + second.n_good
    prop = first.prop
    if second.n_good and rng.random() < second.n_good / n_good:
        prop = second.prop
    stop = (second.stop
            or _uturn(minus[0], plus[0], minus[1], plus[1], inv_mass))
    return _Tree(minus=minus, plus=plus, prop=prop, n_good=n_good, stop=stop,
                 alpha=first.alpha + second.alpha,
                 n_alpha=first.n_alpha + second.n_alpha,
                 diverged=first.diverged or second.diverged)


def _nuts_step(f, theta, logp, grad, eps, inv_mass, max_depth, rng):
    dim = len(theta)
    r0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
    joint0 = logp - _kinetic(r0, inv_mass)
    logu = joint0 - rng.exponential()

    minus = (theta, r0, logp, grad)
    plus = minus
    prop = (theta, logp, grad)
    n_good = 1
    sum_alpha = 0.0
    n_alpha = 0
    diverged = False
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        start = minus if direction == -1 else plus
        sub = _build_tree(f, start, logu, direction, depth, eps, inv_mass,
                          joint0, rng)
        sum_alpha += sub.alpha
        n_alpha += sub.n_alpha
        diverged = diverged or sub.diverged
        if direction == -1:
            minus = sub.minus
        else:
            plus = sub.plus
        if sub.stop:
            break
        if sub.n_good and rng.random() < sub.n_good / n_good:
            prop = sub.prop
        n_good += sub.n_good
        if _uturn(minus[0], plus[0], minus[1], plus[1], inv_mass):
            break
        depth += 1

    accept_stat = sum_alpha / max(n_alpha, 1)
    return prop, accept_stat, diverged, depth


def _find_initial_step_size(f, theta, logp, grad, inv_mass, rng):
    """Double or halve until one leapfrog step crosses 50% acceptance."""
    dim = len(theta)
    eps = 1.0
    r0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
    joint0 = logp - _kinetic(r0, inv_mass)

    def log_ratio(eps):
        _, r1, logp1, _ = _leapfrog(f, theta, r0, grad, eps, inv_mass)
        joint = logp1 - _kinetic(r1, inv_mass)
        return joint - joint0

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(100):
        if direction * log_ratio(eps) <= direction * math.log(0.5):
            break
        eps *= 2.0 ** direction
        if not 1e-10 < eps < 1e10:
            break
    return eps


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance.

    ``anchor`` scales the shrinkage point mu = log(anchor * eps0): 10 biases
    the opening exploration upward from a crude initial search, while window
    restarts use 2 because eps0 is then already near its equilibrium.
    """

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75, anchor=10.0):
        self.mu = math.log(anchor * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat):
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** -self.kappa
        self.log_eps_bar = (1 - w) * self.log_eps_bar + w * self.log_eps

    @property
    def eps(self):
        return math.exp(self.log_eps)

    @property
    def adapted_eps(self):
        return math.exp(self.log_eps_bar)


def _variance_windows(warmup, init_buffer=75, base=25):
    """Expanding (start, end) windows for mass-matrix estimation.

    The terminal buffer grows with warmup length so the step size has room
    to re-equilibrate after the last metric update.
    """
    term_buffer = max(50, warmup // 7)
    if warmup < init_buffer + term_buffer + base:
        return []
    windows = []
    start, size = init_buffer, base
    while True:
        end = start + size
        if end + 2 * size > warmup - term_buffer:
            windows.append((start, warmup - term_buffer))
            break
        windows.append((start, end))
        start, size = end, size * 2
    return windows


def nuts_chain(f, theta0, warmup, samples, target_accept, max_depth, rng):
    """Run one chain; f maps theta to (log density, gradient).

    Returns (draws (samples, dim), ChainStats).
    """
    theta = np.array(theta0, dtype=float)
    logp, grad = f(theta)
    if not math.isfinite(logp):
        raise NonFiniteDensity("initialization", "(chain started at -inf)")

    inv_mass = np.ones(len(theta))
    da = _DualAveraging(_find_initial_step_size(f, theta, logp, grad, inv_mass, rng),
                        target_accept)
    eps = da.eps
    windows = _variance_windows(warmup)
    window_at = {end: start for start, end in windows}
    last_window_end = windows[-1][1] if windows else -1
    buffer_start = windows[0][0] if windows else warmup
    buffer = []

    draws = np.empty((samples, len(theta)))
    divergences = 0
    accept_sum = 0.0
    depth_hits = 0

    for m in range(warmup + samples):
        (theta, logp, grad), accept_stat, diverged, depth = _nuts_step(
            f, theta, logp, grad, eps, inv_mass, max_depth, rng)
        if m < warmup:
            da.update(accept_stat)
            eps = da.eps
            if m >= buffer_start:
                buffer.append(theta)
            if (m + 1) in window_at:
                w = np.asarray(buffer)
                n = len(w)
                var = w.var(axis=0, ddof=1) if n > 1 else np.ones(len(theta))
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                inv_mass = np.maximum(inv_mass, 1e-10)
                buffer = []
                # early metric updates invalidate the step size: search anew;
                # by the final window the metric has settled, so the
                # accumulated averaging state stays valid and avoids a fresh
                # transient right before the step size freezes
                if m + 1 != last_window_end:
                    eps = _find_initial_step_size(f, theta, logp, grad, inv_mass, rng)
                    da = _DualAveraging(eps, target_accept, anchor=2.0)
            if m + 1 == warmup:
                eps = da.adapted_eps
        else:
            draws[m - warmup] = theta
            divergences += int(diverged)
            accept_sum += accept_stat
            depth_hits += int(depth >= max_depth)

    stats = ChainStats(divergences=divergences,
                       accept_stat=accept_sum / samples,
                       step_size=eps,
                       max_depth_hits=depth_hits)
    return draws, stats


def sample_nuts(logp_and_grad, dim, config: SamplerConfig,
                init=None) -> tuple:
    """Multi-chain NUTS over an arbitrary target.

    Returns (draws (chains, samples, dim), list of ChainStats). Non-finite
    density values are treated as rejected states.
    """

    def f(theta):
        v, g = logp_and_grad(theta)
        if not math.isfinite(v) or not np.all(np.isfinite(g)):
            return -math.inf, np.zeros(dim)
        return float(v), g

    all_draws = np.empty((config.chains, config.samples, dim))
    stats = []
    for chain in range(config.chains):
        rng = np.random.default_rng(config.seed + chain)
        theta0 = None
        for _ in range(100):
            candidate = init if init is not None else rng.normal(0.0, 0.1, dim)
            if math.isfinite(f(candidate)[0]):
                theta0 = candidate
                break
            if init is not None:
                break
        if theta0 is None:
            raise NonFiniteDensity("initialization",
                                   "(no finite start after 100 attempts)")
        draws, st = nuts_chain(f, theta0, config.warmup, config.samples,
                               config.target_accept, config.max_depth, rng)
        all_draws[chain] = draws
        stats.append(st)
    return all_draws, stats


def run_hmc(inputs, config: SamplerConfig) -> PosteriorDraws:
    """Fit the timing model: smoke-test the gradient, sample all chains,
    attach diagnostics."""
    ev = LogPosterior(inputs)
    # smoke tolerance is loose: it guards against wrong gradients, while
    # finite-difference noise scales with the log-density magnitude
    report = gradient_check(inputs, n_points=2, seed=config.seed, tolerance=1e-3)
    if not report.passed:
        raise GradientCheckFailed(
            f"max relative error {report.max_rel_err:.3g} at {report.worst_coord}")

    draws, stats = sample_nuts(ev.value_and_grad, ev.dim, config)
    pd = PosteriorDraws(
        draws=draws,
        layout=ev.layout,
        param_names=ev.layout.names(inputs.index),
        seed=config.seed,
        config=config,
        chain_stats=stats,
    )
    attach_diagnostics(pd)
    total = config.chains * config.samples
    n_div = int(pd.divergences.sum())
    if n_div > 0.1 * total:
        raise DivergenceStorm(
            f"{n_div}/{total} post-warmup transitions diverged")
    return pd


# ---------------------------------------------------------------------------
# Convergence diagnostics


def _split_chains(x):
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, n - half:]])


def _z_scale(x):
    """Rank-normalize pooled draws, preserving shape."""
    ranks = rankdata(x, method="average").reshape(x.shape)
    return norm.ppf((ranks - 0.5) / x.size)


def _basic_rhat(x):
    m, n = x.shape
    chain_mean = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * chain_mean.var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    return math.sqrt((n - 1) / n + between / (n * within))


def rhat(x) -> float:
    """Split-chain rank-normalized potential scale reduction for one
    parameter; x has shape (chains, samples)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise InsufficientDraws("need >= 2 chains and >= 4 samples per chain")
    if np.ptp(x) == 0.0:
        return 1.0
    bulk = _basic_rhat(_z_scale(_split_chains(x)))
    folded = np.abs(x - np.median(x))
    tail = _basic_rhat(_z_scale(_split_chains(folded)))
    return max(bulk, tail)


def _autocov(x):
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 2 * n
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def ess_bulk(x) -> float:
    """Effective sample size from rank-normalized split chains, using the
    initial monotone positive sequence of paired autocorrelations."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise InsufficientDraws("need >= 4 samples per chain")
    if np.ptp(x) == 0.0:
        return float(x.size)
    z = _z_scale(_split_chains(x))
    m, n = z.shape
    acov = _autocov(z)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += z.mean(axis=1).var(ddof=1)
    if var_plus == 0.0:
        return float(x.size)

    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer pairs: keep while sums are positive, enforce monotone decrease
    tau = 0.0
    prev = math.inf
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += pair
        t += 2
    tau = max(1.0 + 2.0 * tau, 1.0 / math.log10(max(m * n, 10)))
    return min(m * n / tau, float(m * n))


def attach_diagnostics(pd: PosteriorDraws):
    """Fill per-parameter split R-hat, effective sample size, and the
    zero-variance flag in place."""
    chains, samples, dim = pd.draws.shape
    rh = np.empty(dim)
    es = np.empty(dim)
    zero = np.zeros(dim, dtype=bool)
    for k in range(dim):
        x = pd.draws[:, :, k]
        zero[k] = np.ptp(x) == 0.0
        if chains >= 2 and samples >= 4:
            rh[k] = rhat(x)
        else:
            rh[k] = 1.0 if zero[k] else math.nan
        es[k] = ess_bulk(x) if samples >= 4 else math.nan
    pd.rhat = rh
    pd.ess = es
    pd.zero_variance = zero
    return pd


def compute_rhat(pd) -> np.ndarray:
    """Per-parameter split-chain rank-normalized R-hat of a PosteriorDraws
    or a raw (chains, samples, dim) array."""
    draws = pd.draws if isinstance(pd, PosteriorDraws) else np.asarray(pd)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    chains, samples, dim = draws.shape
    if chains < 2 or samples < 4:
        raise InsufficientDraws("need >= 2 chains and >= 4 samples per chain")
    return np.array([rhat(draws[:, :, k]) for k in range(dim)])


# ---------------------------------------------------------------------------
# Draw file round trip


def save_draws(pd: PosteriorDraws, path, extra=None):
    """One JSON header line, then one '%.17g'-formatted row per draw in
    chain-major order."""
    header = {
        "format": DRAWS_FORMAT,
        "chains": pd.n_chains,
        "samples": pd.n_samples,
        "dim": pd.dim,
        "seed": pd.seed,
        "config": asdict(pd.config),
        "layout": pd.layout.to_dict() if pd.layout is not None else None,
        "param_names": list(pd.param_names),
        "chain_stats": [asdict(s) for s in pd.chain_stats],
        "meta": dict(pd.meta, **(extra or {})),
    }
    lines = [json.dumps(header, sort_keys=True)]
    flat = pd.stacked()
    for row in flat:
        lines.append(" ".join("%.17g" % v for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_draws(path) -> PosteriorDraws:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DRAWS_FORMAT:
            raise ValueError(f"{path} is not a draw file")
        flat = np.loadtxt(fh, ndmin=2)
    chains, samples, dim = header["chains"], header["samples"], header["dim"]
    if flat.shape != (chains * samples, dim):
        raise ValueError(f"draw file body {flat.shape} does not match header")
    layout = (ParameterLayout.from_dict(header["layout"])
              if header["layout"] else None)
    pd = PosteriorDraws(
        draws=flat.reshape(chains, samples, dim),
        layout=layout,
        param_names=header["param_names"],
        seed=header["seed"],
        config=SamplerConfig(**header["config"]),
        chain_stats=[ChainStats(**s) for s in header["chain_stats"]],
        meta=header.get("meta", {}),
    )
    if chains >= 2 and samples >= 4:
        attach_diagnostics(pd)
    return pd
