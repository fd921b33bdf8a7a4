"""Place-level predictions and coverage-weighted country estimates.

Country series blend the fitted place components with an "unobserved"
component that stands in for stillbirths no data source captures. Weights
are the ratio of classified stillbirths observed in a place to the total
stillbirths estimated nationally over the same country-years, computed per
posterior sample of the totals so that their uncertainty propagates.
Posterior draw j is paired with covariate sample j mod J throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import ModelInputs
from .errors import DrawMismatch, MissingSBR, UnknownPlace
from .posterior import SIGMA_NAMES
from .splines import build_basis

QUANTILES = (0.05, 0.1, 0.5, 0.9, 0.95)

_SIG_BETA_R = SIGMA_NAMES.index("beta_r")
_SIG_BETA_C = SIGMA_NAMES.index("beta_c")
_SIG_BETA_P = SIGMA_NAMES.index("beta_p")
_SIG_DELTA = SIGMA_NAMES.index("delta")


@dataclass
class PlaceWeights:
    """Per-place share of national stillbirths, one row per covariate sample."""

    places: list
    countries: list  # country per place
    w: np.ndarray  # (J, P)
    downscaled: dict  # country -> True if any sample was rescaled to sum to 1

    def columns(self, country):
        return [i for i, c in enumerate(self.countries) if c == country]


@dataclass
class PlaceEstimate:
    place: str
    years: np.ndarray
    samples: np.ndarray  # (n draws, n years), proportions in (0, 1)

    @property
    def name(self):
        return self.place


@dataclass
class WeightReport:
    place_weights: dict
    observed_total: float
    unobserved_share: float
    downscaled: bool


@dataclass
class CountryEstimate:
    country: str
    years: np.ndarray
    samples: np.ndarray
    weights: WeightReport

    @property
    def name(self):
        return self.country


def compute_weights(inputs: ModelInputs, sbr=None) -> PlaceWeights:
    """Observed classified stillbirths over estimated national totals, per
    place; partial-year spans scale their denominator term; per-country
    totals above 1 are rescaled to sum to 1 sample by sample."""
    cov = sbr if sbr is not None else inputs.covariates
    h = inputs.index
    n_samples = cov.n_samples
    num = np.zeros(h.n_places)
    den = np.zeros((n_samples, h.n_places))
    for o in inputs.observations:
        p = h.place_index[o.place]
        key = (o.country, o.grid_year(h.year_min, h.year_max))
        if key not in cov.sbr_samples:
            raise MissingSBR(f"no stillbirth samples for {key[0]} in {key[1]}")
        num[p] += o.n
        den[:, p] += cov.sbr_samples[key] * o.year_fraction

    with np.errstate(invalid="ignore"):
        w = np.where(den > 0, num / den, 0.0)

    downscaled = {}
    for ci, country in enumerate(h.countries):
        cols = np.flatnonzero(h.place_country == ci)
        totals = w[:, cols].sum(axis=1)
        over = totals > 1.0
        if over.any():
            w[np.ix_(over, cols)] /= totals[over, None]
        downscaled[country] = bool(over.any())

    return PlaceWeights(
        places=list(h.places),
        countries=[h.countries[h.place_country[p]] for p in range(h.n_places)],
        w=w,
        downscaled=downscaled,
    )


def _sample_rows(n_draws, n_samples):
    return np.arange(n_draws) % n_samples


def _log_nmr_draws(inputs, country, years, n_draws):
    cov = inputs.covariates
    mat = np.stack([np.log(cov.nmr_samples[(country, int(t))]) for t in years],
                   axis=1)  # (J, T)
    return mat[_sample_rows(n_draws, cov.n_samples)]


def predict_place(draws, place, inputs: ModelInputs, basis=None) -> PlaceEstimate:
    """Posterior samples of the place proportion on the year grid, using the
    fitted intercepts and trend and NMR posterior samples; no observation
    error and no definition adjustment enter predictions."""
    h = inputs.index
    if place not in h.place_index:
        raise UnknownPlace(f"place '{place}' has no sampled parameters")
    basis = basis or build_basis(h.year_min, h.year_max)
    layout = draws.layout
    p = h.place_index[place]
    c = int(h.place_country[p])
    r = int(h.country_region[c])

    flat = draws.stacked()
    n = len(flat)
    level = (flat[:, layout.beta0.start]
             + flat[:, layout.beta_r.start + r]
             + flat[:, layout.beta_c.start + c])
    col = layout.beta_p_col[p]
    if col >= 0:
        level = level + flat[:, layout.beta_p.start + col]
    k = layout.n_free_coef
    u = flat[:, layout.u.start + p * k:layout.u.start + (p + 1) * k]
    eta = u @ basis.BZ.T  # (n, T)

    years = h.years
    lognmr = _log_nmr_draws(inputs, h.countries[c], years, n)
    mu = level[:, None] + flat[:, layout.beta_nmr.start][:, None] * lognmr + eta
    return PlaceEstimate(place=place, years=years, samples=expit(mu))


def predict_unobserved(draws, country, inputs: ModelInputs, seed,
                       region=None, basis=None) -> np.ndarray:
    """Per-draw samples for the uncaptured remainder of a country: fitted
    region/country intercepts and NMR effect, plus a fresh place effect and a
    fresh sum-to-zero trend drawn from the fitted scales.

    Countries absent from the hierarchy get a fresh country effect too, and
    a fresh region effect unless ``region`` names a fitted one. Randomness
    comes from a dedicated stream seeded here, independent of sampling.
    """
    h = inputs.index
    basis = basis or build_basis(h.year_min, h.year_max)
    layout = draws.layout
    rng = np.random.default_rng(seed)

    flat = draws.stacked()
    n = len(flat)
    lam = flat[:, layout.log_sigma]
    beta_p_new = rng.standard_normal(n) * np.exp(lam[:, _SIG_BETA_P])
    deltas = rng.standard_normal((n, basis.n_coef - 1)) * np.exp(lam[:, _SIG_DELTA])[:, None]
    alpha = np.concatenate([np.zeros((n, 1)), np.cumsum(deltas, axis=1)], axis=1)
    alpha -= alpha.mean(axis=1, keepdims=True)
    eta = alpha @ basis.B.T  # (n, T)

    if country in h.country_index:
        c = h.country_index[country]
        bc = flat[:, layout.beta_c.start + c]
        br = flat[:, layout.beta_r.start + int(h.country_region[c])]
    else:
        bc = rng.standard_normal(n) * np.exp(lam[:, _SIG_BETA_C])
        if region is not None and region in h.region_index:
            br = flat[:, layout.beta_r.start + h.region_index[region]]
        else:
            br = rng.standard_normal(n) * np.exp(lam[:, _SIG_BETA_R])

    years = h.years
    lognmr = _log_nmr_draws(inputs, country, years, n)
    mu = ((flat[:, layout.beta0.start] + br + bc + beta_p_new)[:, None]
          + flat[:, layout.beta_nmr.start][:, None] * lognmr
          + eta)
    return expit(mu)


def predict_country(country, weights: PlaceWeights, place_estimates,
                    unobserved, years=None) -> CountryEstimate:
    """Convex combination of place estimates and the unobserved component,
    weighted per draw."""
    unobserved = np.asarray(unobserved)
    n = unobserved.shape[0]
    by_place = {pe.place: pe for pe in place_estimates}
    cols = weights.columns(country)
    expected = {weights.places[i] for i in cols}
    if set(by_place) != expected:
        raise DrawMismatch(
            f"place estimates {sorted(by_place)} do not cover places "
            f"{sorted(expected)} of {country}")
    for pe in place_estimates:
        if pe.samples.shape != unobserved.shape:
            raise DrawMismatch(
                f"place '{pe.place}' has shape {pe.samples.shape}, "
                f"unobserved component has {unobserved.shape}")
        if years is None:
            years = pe.years

    rows = _sample_rows(n, weights.w.shape[0])
    total = np.zeros(n)
    combined = np.zeros_like(unobserved)
    report_weights = {}
    for i in cols:
        place = weights.places[i]
        w_col = weights.w[rows, i]
        combined += w_col[:, None] * by_place[place].samples
        total += w_col
        report_weights[place] = float(weights.w[:, i].mean())
    combined += (1.0 - total)[:, None] * unobserved

    observed_total = float(weights.w[:, cols].sum(axis=1).mean()) if cols else 0.0
    report = WeightReport(
        place_weights=report_weights,
        observed_total=observed_total,
        unobserved_share=1.0 - observed_total,
        downscaled=weights.downscaled.get(country, False),
    )
    if years is None:
        raise ValueError("years must be given for a country with no places")
    return CountryEstimate(country=country, years=np.asarray(years),
                           samples=combined, weights=report)


def estimate_country(draws, country, inputs: ModelInputs, weights=None,
                     seed=0, region=None, basis=None) -> CountryEstimate:
    """Full pipeline for one country: weights, place predictions, unobserved
    component, blend."""
    h = inputs.index
    basis = basis or build_basis(h.year_min, h.year_max)
    if weights is None:
        weights = compute_weights(inputs)
    places = [weights.places[i] for i in weights.columns(country)]
    estimates = [predict_place(draws, p, inputs, basis=basis) for p in places]
    unobserved = predict_unobserved(draws, country, inputs, seed=seed,
                                    region=region, basis=basis)
    return predict_country(country, weights, estimates, unobserved, years=h.years)


def summarize(samples, quantiles=QUANTILES) -> np.ndarray:
    """Quantiles over draws; shape (len(quantiles), n years)."""
    return np.quantile(np.asarray(samples), quantiles, axis=0)


def write_estimate_table(estimates, path, label, quantiles=QUANTILES):
    """Long-format delimited text: ``<label>,year,quantile,value``."""
    from .data_model import atomic_write_text

    rows = [f"{label},year,quantile,value"]
    for est in estimates:
        table = summarize(est.samples, quantiles)
        for t, year in enumerate(est.years):
            for qi, q in enumerate(quantiles):
                rows.append(f"{est.name},{int(year)},{q},{repr(float(table[qi, t]))}")
    atomic_write_text(path, "\n".join(rows) + "\n")
