"""Ground-truth scenario generator for recovery and calibration tests.

Topology templates mirror the observed data landscape: one region pattern is
vital-registration dominated and high income, one mixes registration with
facility reporting, and one is dominated by subnational population studies.
Forward simulation follows the model itself: hierarchical intercepts, a
sum-to-zero random-walk trend per place, source-type errors, definition
adjustments, then binomial counts. Covariate "posterior samples" are
log-normal jitter around declining true paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from .data_model import (AuxObservation, CovariateTables, Definition,
                         IncomeGroup, ModelInputs, Observation, SourceType,
                         build_hierarchy, check_coverage)
from .errors import InvalidConfig
from .posterior import SIGMA_NAMES
from .splines import build_basis

_SOURCE_ORDER = (SourceType.CRVS, SourceType.HEALTH_FACILITY,
                 SourceType.HMIS, SourceType.POPULATION_STUDY)
_DEFINITION_ORDER = (Definition.EARLY, Definition.LATE, Definition.UNDEFINED)


@dataclass(frozen=True)
class RegionPattern:
    """Source and definition mix for one region template."""

    source_shares: tuple  # per _SOURCE_ORDER
    definition_shares: tuple  # per _DEFINITION_ORDER
    income: str  # "hic" or "lmic"


# Shares follow the observed registration-heavy, mixed-systems, and
# study-heavy regional profiles.
DEFAULT_PATTERNS = (
    RegionPattern((0.980, 0.015, 0.001, 0.004), (0.465, 0.526, 0.009), "hic"),
    RegionPattern((0.465, 0.047, 0.395, 0.093), (0.628, 0.326, 0.046), "lmic"),
    RegionPattern((0.067, 0.110, 0.012, 0.811), (0.429, 0.534, 0.037), "lmic"),
)


@dataclass
class ScenarioConfig:
    regions: int = 3
    countries_per_region: int = 3
    places_per_country: tuple = (1, 3)  # inclusive bounds
    years: tuple = (2000, 2021)
    seed: int = 0

    beta0: float = -0.9
    beta_nmr: float = 0.5
    sigma_beta_r: float = 0.3
    sigma_beta_c: float = 0.3
    sigma_beta_p: float = 0.25
    sigma_delta: float = 0.1
    sigma_gamma: float = 0.15
    gamma_early_hic: float = 0.31
    gamma_early_lmic: float = 0.45
    sigma_eps: tuple = (0.25, 0.3, 0.25)  # health facility, HMIS, population study

    patterns: tuple = DEFAULT_PATTERNS
    obs_prob: tuple = (0.9, 0.45)  # yearly observation rate: registration, other
    coverage: tuple = (0.05, 0.35)  # non-registration place share of stillbirths
    crvs_coverage: tuple = (0.8, 0.95)
    total_stillbirths: tuple = (800.0, 4000.0)
    partial_year_prob: float = 0.0
    # log NMR level at the window start: centered low with wide cross-country
    # spread, which identifies the slope well and keeps the intercept and
    # slope from being nearly collinear
    nmr_level: tuple = (1.0, 0.8)
    nmr_slope: tuple = (-0.05, -0.015)
    nmr_dispersion: float = 0.05
    sbr_dispersion: float = 0.05
    n_samples: int = 100  # J

    aux_countries: int = 8
    aux_counts: int = 800
    aux_hic_share: float = 0.5
    aux_nu: tuple = (-0.8, 0.5)

    def validate(self):
        if self.regions < 1 or self.countries_per_region < 1:
            raise InvalidConfig("need at least one region and country")
        lo, hi = self.places_per_country
        if not 1 <= lo <= hi:
            raise InvalidConfig(f"bad places_per_country bounds ({lo}, {hi})")
        if self.years[1] - self.years[0] < 3:
            raise InvalidConfig("window must span at least 3 years")
        for name in ("sigma_beta_r", "sigma_beta_c", "sigma_beta_p",
                     "sigma_delta", "sigma_gamma"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if any(s <= 0 for s in self.sigma_eps) or len(self.sigma_eps) != 3:
            raise InvalidConfig("sigma_eps needs three positive entries")
        for pat in self.patterns:
            for shares in (pat.source_shares, pat.definition_shares):
                if any(s < 0 for s in shares) or abs(sum(shares) - 1.0) > 1e-6:
                    raise InvalidConfig(f"shares {shares} must be a probability mix")
            if pat.income not in ("hic", "lmic"):
                raise InvalidConfig(f"unknown income group {pat.income!r}")
        if not 0 <= self.partial_year_prob <= 1:
            raise InvalidConfig("partial_year_prob must lie in [0, 1]")
        if self.n_samples < 1:
            raise InvalidConfig("n_samples must be >= 1")
        if self.aux_countries < 0 or self.aux_counts < 1:
            raise InvalidConfig("bad auxiliary data sizes")
        return self


@dataclass
class GroundTruth:
    """Every latent quantity behind one generated dataset."""

    beta0: float
    beta_nmr: float
    beta_r: dict
    beta_c: dict
    beta_p: dict
    alpha: dict  # place -> constrained spline coefficients (H,)
    gamma_early_hic: float
    gamma_early_lmic: float
    sigma: dict  # keyed by SIGMA_NAMES
    nmr: dict  # (country, year) -> true value
    stillbirths: dict  # (country, year) -> true total
    coverage: dict  # place -> true share of national stillbirths
    obs_mu: tuple  # per observation mean logit (incl. definition adjustment)
    obs_phi: tuple  # per observation binomial probability (incl. error draw)
    place_trajectory: dict  # place -> noiseless proportion path on the grid
    aux_nu: dict


def generate(config: ScenarioConfig):
    """Simulate a full dataset; returns (ModelInputs, GroundTruth)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    year_min, year_max = int(config.years[0]), int(config.years[1])
    basis = build_basis(year_min, year_max)
    grid = np.arange(year_min, year_max + 1)
    n_years = len(grid)

    sigma = dict(zip(SIGMA_NAMES, (*config.sigma_eps,
                                   config.sigma_beta_r, config.sigma_beta_c,
                                   config.sigma_beta_p, config.sigma_delta,
                                   config.sigma_gamma)))
    eps_sigma = {
        SourceType.HEALTH_FACILITY: config.sigma_eps[0],
        SourceType.HMIS: config.sigma_eps[1],
        SourceType.POPULATION_STUDY: config.sigma_eps[2],
    }
    gamma = {"hic": config.gamma_early_hic, "lmic": config.gamma_early_lmic}

    beta_r, beta_c, beta_p = {}, {}, {}
    alpha, coverage, place_traj = {}, {}, {}
    nmr_true, nmr_samples, nmr_point = {}, {}, {}
    sbr_true, sbr_samples = {}, {}
    observations = []
    obs_mu, obs_phi = [], []

    next_id = 1
    for ri in range(config.regions):
        region = f"R{ri + 1}"
        pattern = config.patterns[ri % len(config.patterns)]
        income = IncomeGroup(pattern.income)
        beta_r[region] = rng.normal(0.0, config.sigma_beta_r)
        for ci in range(config.countries_per_region):
            country = f"{region}C{ci + 1}"
            beta_c[country] = rng.normal(0.0, config.sigma_beta_c)

            level = rng.normal(config.nmr_level[0], config.nmr_level[1])
            slope = rng.uniform(*config.nmr_slope)
            total = rng.uniform(*config.total_stillbirths)
            for t in grid:
                value = float(np.exp(level + slope * (t - year_min)))
                nmr_true[(country, int(t))] = value
                nmr_point[(country, int(t))] = value
                nmr_samples[(country, int(t))] = value * np.exp(
                    rng.normal(0.0, config.nmr_dispersion, config.n_samples))
                sbr_true[(country, int(t))] = total
                sbr_samples[(country, int(t))] = total * np.exp(
                    rng.normal(0.0, config.sbr_dispersion, config.n_samples))

            lo, hi = config.places_per_country
            n_places = int(rng.integers(lo, hi + 1))
            for pi in range(n_places):
                place = f"{country}P{pi + 1}"
                beta_p[place] = (0.0 if n_places == 1
                                 else rng.normal(0.0, config.sigma_beta_p))
                deltas = rng.normal(0.0, config.sigma_delta, basis.n_coef - 1)
                a = np.concatenate([[0.0], np.cumsum(deltas)])
                a -= a.mean()
                alpha[place] = a

                source = _SOURCE_ORDER[rng.choice(4, p=pattern.source_shares)]
                if source is SourceType.CRVS:
                    coverage[place] = rng.uniform(*config.crvs_coverage)
                    obs_prob = config.obs_prob[0]
                else:
                    coverage[place] = rng.uniform(*config.coverage)
                    obs_prob = config.obs_prob[1]

                trend = basis.B @ a
                base = (config.beta0 + beta_r[region] + beta_c[country]
                        + beta_p[place])
                lognmr_path = np.array([np.log(nmr_true[(country, int(t))])
                                        for t in grid])
                place_traj[place] = expit(base + config.beta_nmr * lognmr_path
                                          + trend)

                with_obs = rng.random(n_years) < obs_prob
                if not with_obs.any():
                    with_obs[rng.integers(n_years)] = True
                for t_pos in np.flatnonzero(with_obs):
                    t = int(grid[t_pos])
                    if rng.random() < config.partial_year_prob:
                        frac = rng.uniform(0.15, 0.6)
                        start = t + rng.uniform(0.0, 1.0 - frac)
                        end = start + frac
                    else:
                        frac, start, end = 1.0, float(t), float(t + 1)
                    count = max(1, round(sbr_true[(country, t)]
                                         * coverage[place] * frac))
                    definition = _DEFINITION_ORDER[
                        rng.choice(3, p=pattern.definition_shares)]
                    mu = base + config.beta_nmr * np.log(nmr_true[(country, t)]) \
                        + float(trend[t_pos])
                    if definition is Definition.EARLY:
                        mu += gamma[income.value]
                    eps = (0.0 if source is SourceType.CRVS
                           else rng.normal(0.0, eps_sigma[source]))
                    phi = float(expit(mu + eps))
                    y = int(rng.binomial(count, phi))
                    observations.append(Observation(
                        id=next_id, y=y, z=count - y, country=country,
                        place=place, region=region, year_start=start,
                        year_end=end, source_type=source,
                        definition=definition, income_group=income))
                    obs_mu.append(float(mu))
                    obs_phi.append(phi)
                    next_id += 1

    aux = []
    aux_nu = {}
    n_hic = round(config.aux_countries * config.aux_hic_share)
    for ai in range(config.aux_countries):
        name = f"AUX{ai + 1}"
        income = IncomeGroup.HIC if ai < n_hic else IncomeGroup.LMIC
        nu = rng.normal(*config.aux_nu)
        aux_nu[name] = nu
        y_late = int(rng.binomial(config.aux_counts, expit(nu)))
        y_early = int(rng.binomial(config.aux_counts,
                                   expit(nu + gamma[income.value])))
        aux.append(AuxObservation(aux_country=name, y=y_late,
                                  z=config.aux_counts - y_late,
                                  definition=Definition.LATE,
                                  income_group=income))
        aux.append(AuxObservation(aux_country=name, y=y_early,
                                  z=config.aux_counts - y_early,
                                  definition=Definition.EARLY,
                                  income_group=income))

    covariates = CovariateTables(nmr_point=nmr_point, nmr_samples=nmr_samples,
                                 sbr_samples=sbr_samples,
                                 n_samples=config.n_samples)
    hierarchy = build_hierarchy(observations, (year_min, year_max))
    check_coverage(covariates, hierarchy.countries, (year_min, year_max))
    inputs = ModelInputs(observations=tuple(observations), aux=tuple(aux),
                         covariates=covariates, index=hierarchy)

    truth = GroundTruth(
        beta0=config.beta0, beta_nmr=config.beta_nmr,
        beta_r=beta_r, beta_c=beta_c, beta_p=beta_p, alpha=alpha,
        gamma_early_hic=config.gamma_early_hic,
        gamma_early_lmic=config.gamma_early_lmic,
        sigma=sigma, nmr=nmr_true, stillbirths=sbr_true, coverage=coverage,
        obs_mu=tuple(obs_mu), obs_phi=tuple(obs_phi),
        place_trajectory=place_traj, aux_nu=aux_nu)
    return inputs, truth


def standard_scenario(seed=0) -> ScenarioConfig:
    """The default scenario used for convergence and end-to-end checks."""
    return ScenarioConfig(seed=seed)


def gradient_check_scenario(seed=0) -> ScenarioConfig:
    """Instance for finite-difference verification: three regions, a dozen
    countries, small counts so the log density stays small enough for
    central differences at step 1e-5 to resolve 1e-7 absolute error."""
    return ScenarioConfig(
        regions=3,
        countries_per_region=4,
        places_per_country=(1, 2),
        years=(2000, 2010),
        seed=seed,
        total_stillbirths=(30.0, 100.0),
        crvs_coverage=(0.4, 0.7),
        obs_prob=(0.5, 0.35),
        n_samples=20,
        aux_countries=6,
        aux_counts=200,
    )


def recovery_scenario(seed=0) -> ScenarioConfig:
    """Small, well-identified scenario for repeated-fit recovery studies:
    plentiful auxiliary data and a short window keep each fit cheap."""
    return ScenarioConfig(
        regions=3,
        countries_per_region=2,
        places_per_country=(1, 2),
        years=(2000, 2007),
        seed=seed,
        sigma_delta=0.08,
        n_samples=40,
        aux_countries=15,
        aux_counts=600,
        obs_prob=(0.9, 0.6),
        total_stillbirths=(600.0, 2000.0),
    )


def ground_truth_to_dict(truth: GroundTruth) -> dict:
    """JSON-serializable view of a GroundTruth."""
    d = asdict(truth)
    d["alpha"] = {k: list(v) for k, v in truth.alpha.items()}
    d["place_trajectory"] = {k: list(v) for k, v in truth.place_trajectory.items()}
    d["nmr"] = {f"{c}:{t}": v for (c, t), v in truth.nmr.items()}
    d["stillbirths"] = {f"{c}:{t}": v for (c, t), v in truth.stillbirths.items()}
    return d
