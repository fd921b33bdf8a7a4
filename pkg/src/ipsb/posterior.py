"""Joint log posterior of the place-level timing model, with exact gradients.

Observation likelihood: y_i ~ Binomial(y_i + z_i, phi_i) with
logit(phi_i) = mu_i + eps_i, where

    mu_i = beta0 + beta_r + beta_c + beta_p + beta_nmr * log(NMR point)
           + spline trend + definition adjustment.

eps_i is zero for vital-registration observations and a sampled latent for
every other source type, stored non-centered (eps_i = sigma_s * eps_tilde_i)
so the error scales can collapse without funnel pathologies. All scale
parameters live on the log scale with half-Normal(0,1) priors applied on the
natural scale plus the change-of-variables term. beta_nmr carries a flat
prior. Auxiliary paired-definition counts enter through their own binomial
likelihood and inform only the definition adjustments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .data_model import Definition, IncomeGroup, ModelInputs, SourceType
from .errors import NonFiniteDensity
from .splines import build_basis

LOG_2PI = math.log(2.0 * math.pi)
# half-Normal(0,1) log density at sigma, up to the -sigma^2/2 term
HALF_NORMAL_CONST = 0.5 * math.log(2.0 / math.pi)
NU_PRIOR_SD = 10.0

SIGMA_NAMES = (
    "eps_health_facility",
    "eps_hmis",
    "eps_population_study",
    "beta_r",
    "beta_c",
    "beta_p",
    "delta",
    "gamma",
)
_EPS_SLOT = {
    SourceType.HEALTH_FACILITY: 0,
    SourceType.HMIS: 1,
    SourceType.POPULATION_STUDY: 2,
}
_SIG_BETA_R, _SIG_BETA_C, _SIG_BETA_P, _SIG_DELTA, _SIG_GAMMA = 3, 4, 5, 6, 7


def inv_logit(x):
    """Numerically stable logistic function.

    Evaluated through exp(-|x|), so it neither overflows nor flushes
    denormals to zero: arguments down to about -745 still map to a strictly
    positive value, and inv_logit(-x) == 1 - inv_logit(x) exactly.
    """
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def logit(p):
    p = np.asarray(p, dtype=float)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class ParameterLayout:
    """Named slices into the flat unconstrained parameter vector."""

    beta0: slice
    beta_r: slice
    beta_c: slice
    beta_p: slice
    beta_nmr: slice
    u: slice
    epsilon: slice
    gamma_early_hic: slice
    gamma_early_lmic: slice
    nu: slice
    log_sigma: slice
    size: int
    n_places: int
    n_free_coef: int
    beta_p_col: tuple  # per place: column within beta_p, -1 for structural zero
    eps_obs_ids: tuple  # observation ids owning epsilon entries, in slice order
    nu_countries: tuple

    def names(self, hierarchy) -> list:
        out = ["beta0"]
        out += [f"beta_r[{r}]" for r in hierarchy.regions]
        out += [f"beta_c[{c}]" for c in hierarchy.countries]
        for p, col in zip(hierarchy.places, self.beta_p_col):
            if col >= 0:
                out.append(f"beta_p[{p}]")
        out.append("beta_nmr")
        for p in hierarchy.places:
            out += [f"u[{p},{k}]" for k in range(self.n_free_coef)]
        out += [f"eps[{i}]" for i in self.eps_obs_ids]
        out += ["gamma_early_hic", "gamma_early_lmic"]
        out += [f"nu[{c}]" for c in self.nu_countries]
        out += [f"log_sigma[{s}]" for s in SIGMA_NAMES]
        assert len(out) == self.size
        return out

    def to_dict(self):
        slices = {
            name: [getattr(self, name).start, getattr(self, name).stop]
            for name in ("beta0", "beta_r", "beta_c", "beta_p", "beta_nmr", "u",
                         "epsilon", "gamma_early_hic", "gamma_early_lmic",
                         "nu", "log_sigma")
        }
        return {
            "slices": slices,
            "size": self.size,
            "n_places": self.n_places,
            "n_free_coef": self.n_free_coef,
            "beta_p_col": list(self.beta_p_col),
            "eps_obs_ids": list(self.eps_obs_ids),
            "nu_countries": list(self.nu_countries),
        }

    @classmethod
    def from_dict(cls, d):
        slices = {k: slice(a, b) for k, (a, b) in d["slices"].items()}
        return cls(
            size=d["size"],
            n_places=d["n_places"],
            n_free_coef=d["n_free_coef"],
            beta_p_col=tuple(d["beta_p_col"]),
            eps_obs_ids=tuple(d["eps_obs_ids"]),
            nu_countries=tuple(d["nu_countries"]),
            **slices,
        )


@dataclass
class ParameterVector:
    """Flat real vector plus its layout."""

    data: np.ndarray
    layout: ParameterLayout

    def get(self, name) -> np.ndarray:
        return self.data[getattr(self.layout, name)]

    def set(self, name, values):
        self.data[getattr(self.layout, name)] = values


@dataclass
class LogDensityResult:
    value: float
    gradient: np.ndarray


def build_layout(inputs: ModelInputs) -> ParameterLayout:
    h = inputs.index
    n_free_coef = h.n_coef - 1

    beta_p_col = []
    col = 0
    for p in range(h.n_places):
        if h.single_place[h.place_country[p]]:
            beta_p_col.append(-1)
        else:
            beta_p_col.append(col)
            col += 1

    eps_obs_ids = tuple(o.id for o in inputs.observations
                        if o.source_type is not SourceType.CRVS)
    nu_countries = tuple(sorted({a.aux_country for a in inputs.aux}))

    cursor = 0

    def take(n):
        nonlocal cursor
        s = slice(cursor, cursor + n)
        cursor += n
        return s

    return ParameterLayout(
        beta0=take(1),
        beta_r=take(h.n_regions),
        beta_c=take(h.n_countries),
        beta_p=take(col),
        beta_nmr=take(1),
        u=take(h.n_places * n_free_coef),
        epsilon=take(len(eps_obs_ids)),
        gamma_early_hic=take(1),
        gamma_early_lmic=take(1),
        nu=take(len(nu_countries)),
        log_sigma=take(len(SIGMA_NAMES)),
        size=cursor,
        n_places=h.n_places,
        n_free_coef=n_free_coef,
        beta_p_col=tuple(beta_p_col),
        eps_obs_ids=eps_obs_ids,
        nu_countries=nu_countries,
    )


def _gamma_code(obs) -> int:
    """0: no adjustment, 1: early/high-income, 2: early/low-middle income."""
    if obs.definition is not Definition.EARLY:
        return 0
    return 1 if obs.income_group is IncomeGroup.HIC else 2


class LogPosterior:
    """Vectorized evaluator for the joint log density and its gradient."""

    def __init__(self, inputs: ModelInputs, basis=None):
        h = inputs.index
        self.inputs = inputs
        self.basis = basis or build_basis(h.year_min, h.year_max)
        if self.basis.n_coef != h.n_coef:
            raise ValueError("basis does not match the hierarchy year grid")
        self.layout = build_layout(inputs)
        self.n_places = h.n_places
        self.n_grid = h.year_max - h.year_min + 1
        self.K = self.layout.n_free_coef
        self.BZ = self.basis.BZ
        self.DZ = self.basis.DZ

        obs = inputs.observations
        self.n_obs = len(obs)
        self.y = np.array([o.y for o in obs], dtype=float)
        self.n = np.array([o.n for o in obs], dtype=float)
        self.r_idx = np.array([h.region_index[o.region] for o in obs], dtype=int)
        self.c_idx = np.array([h.country_index[o.country] for o in obs], dtype=int)
        self.p_idx = np.array([h.place_index[o.place] for o in obs], dtype=int)
        self.t_idx = np.array([o.grid_year(h.year_min, h.year_max) - h.year_min
                               for o in obs], dtype=int)
        self.lognmr = np.array(
            [math.log(inputs.covariates.nmr_point[(o.country, int(t + h.year_min))])
             for o, t in zip(obs, self.t_idx)], dtype=float)
        gcode = np.array([_gamma_code(o) for o in obs], dtype=int)
        self.g_eh_obs = np.flatnonzero(gcode == 1)
        self.g_el_obs = np.flatnonzero(gcode == 2)
        self.gcode = gcode

        pcol = np.array([self.layout.beta_p_col[p] for p in self.p_idx], dtype=int) \
            if self.n_obs else np.zeros(0, dtype=int)
        n_free_bp = self.layout.beta_p.stop - self.layout.beta_p.start
        self.pcol_safe = np.where(pcol >= 0, pcol, n_free_bp)
        self.n_free_bp = n_free_bp

        self.eps_obs_pos = np.flatnonzero(
            [o.source_type is not SourceType.CRVS for o in obs])
        self.eps_slot = np.array(
            [_EPS_SLOT[obs[i].source_type] for i in self.eps_obs_pos], dtype=int)

        aux = inputs.aux
        self.n_aux = len(aux)
        self.ay = np.array([a.y for a in aux], dtype=float)
        self.an = np.array([a.n for a in aux], dtype=float)
        nu_index = {c: i for i, c in enumerate(self.layout.nu_countries)}
        self.anu_idx = np.array([nu_index[a.aux_country] for a in aux], dtype=int)
        agcode = np.array(
            [0 if a.definition is Definition.LATE
             else (1 if a.income_group is IncomeGroup.HIC else 2) for a in aux],
            dtype=int)
        self.ag_eh = np.flatnonzero(agcode == 1)
        self.ag_el = np.flatnonzero(agcode == 2)
        self.agcode = agcode

        self.binom_const = float(
            np.sum(gammaln(self.n + 1) - gammaln(self.y + 1)
                   - gammaln(self.n - self.y + 1))
            + np.sum(gammaln(self.an + 1) - gammaln(self.ay + 1)
                     - gammaln(self.an - self.ay + 1)))

    @property
    def dim(self):
        return self.layout.size

    def _unpack(self, th):
        l = self.layout
        return (
            th[l.beta0.start], th[l.beta_r], th[l.beta_c], th[l.beta_p],
            th[l.beta_nmr.start], th[l.u].reshape(self.n_places, self.K),
            th[l.epsilon], th[l.gamma_early_hic.start],
            th[l.gamma_early_lmic.start], th[l.nu], th[l.log_sigma],
        )

    def _obs_logits(self, b0, br, bc, bp, bnmr, U, eps_t, geh, gel, sig):
        bp_pad = np.append(bp, 0.0)
        mu = (b0
              + br[self.r_idx]
              + bc[self.c_idx]
              + bp_pad[self.pcol_safe]
              + bnmr * self.lognmr)
        if self.n_places and self.n_obs:
            eta = U @ self.BZ.T
            mu = mu + eta[self.p_idx, self.t_idx]
        gvals = np.array([0.0, geh, gel])
        mu = mu + gvals[self.gcode]
        eps_full = np.zeros(self.n_obs)
        eps_val = sig[self.eps_slot] * eps_t
        eps_full[self.eps_obs_pos] = eps_val
        return mu + eps_full, eps_val

    def value_and_grad(self, theta, want_grad=True):
        """Log density and gradient; may return -inf with a zero gradient at
        overflow points (the sampler treats those as rejections)."""
        l = self.layout
        th = np.asarray(theta, dtype=float)
        b0, br, bc, bp, bnmr, U, eps_t, geh, gel, nu, lam = self._unpack(th)

        with np.errstate(over="ignore", invalid="ignore"):
            sig = np.exp(lam)
            x, eps_val = self._obs_logits(b0, br, bc, bp, bnmr, U, eps_t, geh, gel, sig)
            value = self.binom_const + float(self.y @ x - self.n @ np.logaddexp(0.0, x))

            gvals = np.array([0.0, geh, gel])
            xa = nu[self.anu_idx] + gvals[self.agcode] if self.n_aux else np.zeros(0)
            if self.n_aux:
                value += float(self.ay @ xa - self.an @ np.logaddexp(0.0, xa))

            # priors
            sd = {name: sig[i] for i, name in enumerate(SIGMA_NAMES)}
            n_eps = len(eps_t)
            value += -0.5 * float(eps_t @ eps_t) - 0.5 * n_eps * LOG_2PI
            value += -0.5 * b0 * b0 - 0.5 * LOG_2PI
            for vec, slot in ((br, _SIG_BETA_R), (bc, _SIG_BETA_C), (bp, _SIG_BETA_P)):
                s = sig[slot]
                value += (-len(vec) * lam[slot]
                          - 0.5 * float(vec @ vec) / (s * s)
                          - 0.5 * len(vec) * LOG_2PI)
            if self.n_places:
                delta = U @ self.DZ.T
                s = sig[_SIG_DELTA]
                nd = delta.size
                value += (-nd * lam[_SIG_DELTA]
                          - 0.5 * float(np.sum(delta * delta)) / (s * s)
                          - 0.5 * nd * LOG_2PI)
            else:
                delta = None
            value += -0.5 * geh * geh - 0.5 * LOG_2PI
            sgam = sig[_SIG_GAMMA]
            value += (-lam[_SIG_GAMMA]
                      - 0.5 * (gel - geh) ** 2 / (sgam * sgam) - 0.5 * LOG_2PI)
            value += (-len(nu) * math.log(NU_PRIOR_SD)
                      - 0.5 * float(nu @ nu) / NU_PRIOR_SD ** 2
                      - 0.5 * len(nu) * LOG_2PI)
            # half-Normal(0,1) on each scale, plus the log-scale Jacobian
            value += float(np.sum(HALF_NORMAL_CONST - 0.5 * sig * sig + lam))

            if not want_grad:
                return value, None

            g = np.zeros(l.size)
            g_x = self.y - self.n * expit(x)
            g[l.beta0.start] = g_x.sum() - b0
            g[l.beta_r] = (np.bincount(self.r_idx, weights=g_x, minlength=len(br))
                           - br / sig[_SIG_BETA_R] ** 2)
            g[l.beta_c] = (np.bincount(self.c_idx, weights=g_x, minlength=len(bc))
                           - bc / sig[_SIG_BETA_C] ** 2)
            g[l.beta_p] = (np.bincount(self.pcol_safe, weights=g_x,
                                       minlength=self.n_free_bp + 1)[:self.n_free_bp]
                           - bp / sig[_SIG_BETA_P] ** 2)
            g[l.beta_nmr.start] = g_x @ self.lognmr

            if self.n_places:
                s2 = sig[_SIG_DELTA] ** 2
                gU = -(delta / s2) @ self.DZ
                if self.n_obs:
                    flat = self.p_idx * self.n_grid + self.t_idx
                    g_pt = np.bincount(flat, weights=g_x,
                                       minlength=self.n_places * self.n_grid)
                    gU += g_pt.reshape(self.n_places, self.n_grid) @ self.BZ
                g[l.u] = gU.ravel()

            g[l.epsilon] = g_x[self.eps_obs_pos] * sig[self.eps_slot] - eps_t

            g_geh = float(g_x[self.g_eh_obs].sum()) - geh
            g_gel = float(g_x[self.g_el_obs].sum())
            if self.n_aux:
                g_xa = self.ay - self.an * expit(xa)
                g[l.nu] = (np.bincount(self.anu_idx, weights=g_xa, minlength=len(nu))
                           - nu / NU_PRIOR_SD ** 2)
                g_geh += float(g_xa[self.ag_eh].sum())
                g_gel += float(g_xa[self.ag_el].sum())
            else:
                g[l.nu] = -nu / NU_PRIOR_SD ** 2
            pull = (gel - geh) / (sgam * sgam)
            g[l.gamma_early_hic.start] = g_geh + pull
            g[l.gamma_early_lmic.start] = g_gel - pull

            g_lam = np.zeros(len(SIGMA_NAMES))
            if len(self.eps_obs_pos):
                g_lam[:3] = np.bincount(self.eps_slot,
                                        weights=g_x[self.eps_obs_pos] * eps_val,
                                        minlength=3)
            for vec, slot in ((br, _SIG_BETA_R), (bc, _SIG_BETA_C), (bp, _SIG_BETA_P)):
                g_lam[slot] += float(vec @ vec) / sig[slot] ** 2 - len(vec)
            if self.n_places:
                g_lam[_SIG_DELTA] += (float(np.sum(delta * delta)) / sig[_SIG_DELTA] ** 2
                                      - delta.size)
            g_lam[_SIG_GAMMA] += (gel - geh) ** 2 / (sgam * sgam) - 1.0
            g_lam += 1.0 - sig * sig
            g[l.log_sigma] = g_lam

        return value, g

    def value(self, theta):
        v, _ = self.value_and_grad(theta, want_grad=False)
        return v

    def term_values(self, theta) -> dict:
        """Per-term log-density values, for diagnosing non-finite results."""
        th = np.asarray(theta, dtype=float)
        b0, br, bc, bp, bnmr, U, eps_t, geh, gel, nu, lam = self._unpack(th)
        with np.errstate(over="ignore", invalid="ignore"):
            sig = np.exp(lam)
            x, _ = self._obs_logits(b0, br, bc, bp, bnmr, U, eps_t, geh, gel, sig)
            gvals = np.array([0.0, geh, gel])
            xa = nu[self.anu_idx] + gvals[self.agcode] if self.n_aux else np.zeros(0)
            terms = {
                "likelihood": float(self.y @ x - self.n @ np.logaddexp(0.0, x)),
                "aux_likelihood": float(self.ay @ xa - self.an @ np.logaddexp(0.0, xa))
                                  if self.n_aux else 0.0,
                "epsilon_prior": -0.5 * float(eps_t @ eps_t),
                "beta0_prior": -0.5 * b0 * b0,
                "beta_r_prior": -0.5 * float(br @ br) / sig[_SIG_BETA_R] ** 2
                                - len(br) * lam[_SIG_BETA_R],
                "beta_c_prior": -0.5 * float(bc @ bc) / sig[_SIG_BETA_C] ** 2
                                - len(bc) * lam[_SIG_BETA_C],
                "beta_p_prior": -0.5 * float(bp @ bp) / sig[_SIG_BETA_P] ** 2
                                - len(bp) * lam[_SIG_BETA_P],
                "spline_penalty": 0.0,
                "gamma_prior": -0.5 * geh * geh
                               - 0.5 * (gel - geh) ** 2 / sig[_SIG_GAMMA] ** 2
                               - lam[_SIG_GAMMA],
                "nu_prior": -0.5 * float(nu @ nu) / NU_PRIOR_SD ** 2,
                "sigma_priors": float(np.sum(-0.5 * sig * sig + lam)),
            }
            if self.n_places:
                delta = U @ self.DZ.T
                terms["spline_penalty"] = (
                    -0.5 * float(np.sum(delta * delta)) / sig[_SIG_DELTA] ** 2
                    - delta.size * lam[_SIG_DELTA])
        return terms


def mu_of_observation(params: ParameterVector, obs, inputs: ModelInputs,
                      basis=None) -> float:
    """Mean logit proportion for one observation; the readable scalar route."""
    h = inputs.index
    basis = basis or build_basis(h.year_min, h.year_max)
    layout = params.layout
    t = obs.grid_year(h.year_min, h.year_max)

    mu = float(params.get("beta0")[0])
    mu += float(params.get("beta_r")[h.region_index[obs.region]])
    mu += float(params.get("beta_c")[h.country_index[obs.country]])
    p = h.place_index[obs.place]
    col = layout.beta_p_col[p]
    if col >= 0:
        mu += float(params.get("beta_p")[col])
    mu += float(params.get("beta_nmr")[0]) * math.log(
        inputs.covariates.nmr_point[(obs.country, t)])
    k = layout.n_free_coef
    u_p = params.get("u")[p * k:(p + 1) * k]
    mu += float(basis.BZ[t - h.year_min] @ u_p)
    code = _gamma_code(obs)
    if code == 1:
        mu += float(params.get("gamma_early_hic")[0])
    elif code == 2:
        mu += float(params.get("gamma_early_lmic")[0])
    return mu


def log_posterior(params: ParameterVector, inputs: ModelInputs,
                  evaluator: LogPosterior | None = None) -> LogDensityResult:
    """Joint log density with gradient; raises NonFiniteDensity with the
    offending term's name when the result is not finite."""
    ev = evaluator or LogPosterior(inputs)
    value, grad = ev.value_and_grad(params.data)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        for name, term in ev.term_values(params.data).items():
            if not math.isfinite(term):
                raise NonFiniteDensity(name, f"(value {term})")
        raise NonFiniteDensity("gradient")
    return LogDensityResult(value=value, gradient=grad)


@dataclass
class GradientCheckReport:
    n_points: int
    max_rel_err: float
    worst_coord: str
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def gradient_check(inputs: ModelInputs, n_points=100, step=1e-5, seed=0,
                   scale=0.5, tolerance=1e-5) -> GradientCheckReport:
    """Compare the analytic gradient against central finite differences at
    random points.

    The per-coordinate error is |analytic - fd| / max(|analytic|, |fd|, 0.01),
    so coordinates above 0.01 in magnitude are held to the relative tolerance
    and near-zero ones to an absolute tolerance of tolerance/100.
    """
    ev = LogPosterior(inputs)
    names = ev.layout.names(inputs.index)
    rng = np.random.default_rng(seed)
    worst = (0.0, "")
    for _ in range(n_points):
        theta = rng.normal(0.0, scale, size=ev.dim)
        _, grad = ev.value_and_grad(theta)
        fd = np.empty(ev.dim)
        for k in range(ev.dim):
            theta[k] += step
            up = ev.value(theta)
            theta[k] -= 2 * step
            down = ev.value(theta)
            theta[k] += step
            fd[k] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 0.01)
        rel = np.abs(grad - fd) / denom
        k = int(np.argmax(rel))
        if rel[k] > worst[0]:
            worst = (float(rel[k]), names[k])
    return GradientCheckReport(n_points=n_points, max_rel_err=worst[0],
                               worst_coord=worst[1], tolerance=tolerance)
