"""Out-of-sample checks: time-based holdout, k-fold cross-validation, and
scoring against the posterior predictive of held-out observed proportions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import ModelInputs, SourceType, atomic_write_text, subset_observations
from .errors import (EmptyTest, EmptyTrain, LeakageError, TooFewObservations)
from .posterior import SIGMA_NAMES, _EPS_SLOT, _gamma_code
from .splines import build_basis

GLOBAL_LABEL = "global"

_SIG_BETA_R = SIGMA_NAMES.index("beta_r")
_SIG_BETA_C = SIGMA_NAMES.index("beta_c")
_SIG_BETA_P = SIGMA_NAMES.index("beta_p")
_SIG_DELTA = SIGMA_NAMES.index("delta")


@dataclass
class ReportRow:
    region: str
    mae: float
    coverage95: float
    n: int


@dataclass
class ValidationReport:
    """Mean absolute error and 95% predictive-interval coverage, by region
    and pooled; the pooled row weights observations, not regions."""

    rows: list

    @property
    def global_row(self) -> ReportRow:
        return next(r for r in self.rows if r.region == GLOBAL_LABEL)

    def region_row(self, region) -> ReportRow:
        return next(r for r in self.rows if r.region == region)

    def to_csv(self, path):
        lines = ["region,mae,coverage95,n"]
        for r in self.rows:
            lines.append(f"{r.region},{r.mae:.6f},{r.coverage95:.6f},{r.n}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def holdout_split(inputs: ModelInputs, cutoff_year) -> tuple:
    """Train on observations whose span midpoint falls before the cutoff,
    test on the rest. Auxiliary data always stays in training."""
    train = [o for o in inputs.observations if o.midpoint < cutoff_year]
    test = [o for o in inputs.observations if o.midpoint >= cutoff_year]
    if not train:
        raise EmptyTrain(f"no observations before {cutoff_year}")
    if not test:
        raise EmptyTest(f"no observations at or after {cutoff_year}")
    return subset_observations(inputs, train), test


def kfold_split(inputs: ModelInputs, k, seed) -> list:
    """Seeded random partition into k near-equal folds; returns a list of
    (train inputs, test observations) pairs."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    n = len(inputs.observations)
    if n < k:
        raise TooFewObservations(f"{n} observations cannot form {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.array_split(order, k)
    pairs = []
    for fold in folds:
        mask = np.zeros(n, dtype=bool)
        mask[fold] = True
        test = [inputs.observations[i] for i in np.flatnonzero(mask)]
        train = [inputs.observations[i] for i in np.flatnonzero(~mask)]
        pairs.append((subset_observations(inputs, train), test))
    return pairs


class _FreshEffects:
    """Per-draw realizations for entities absent from training, cached so
    repeated observations of one entity share a realization."""

    def __init__(self, flat, layout, basis, rng):
        self.flat = flat
        self.layout = layout
        self.basis = basis
        self.rng = rng
        self.lam = flat[:, layout.log_sigma]
        self.cache = {}

    def _scaled_normal(self, key, slot):
        if key not in self.cache:
            self.cache[key] = (self.rng.standard_normal(len(self.flat))
                               * np.exp(self.lam[:, slot]))
        return self.cache[key]

    def region(self, name):
        return self._scaled_normal(("region", name), _SIG_BETA_R)

    def country(self, name):
        return self._scaled_normal(("country", name), _SIG_BETA_C)

    def place(self, name):
        return self._scaled_normal(("place", name), _SIG_BETA_P)

    def trend(self, name):
        key = ("trend", name)
        if key not in self.cache:
            n = len(self.flat)
            k = self.basis.n_coef - 1
            deltas = (self.rng.standard_normal((n, k))
                      * np.exp(self.lam[:, _SIG_DELTA])[:, None])
            alpha = np.concatenate([np.zeros((n, 1)), np.cumsum(deltas, axis=1)],
                                   axis=1)
            alpha -= alpha.mean(axis=1, keepdims=True)
            self.cache[key] = alpha
        return self.cache[key]


def score_observations(test, draws, inputs: ModelInputs, seed=0) -> list:
    """Per-observation (observation, absolute error, covered) triples.

    Each held-out point gets a full posterior predictive of its observed
    proportion: the draw's mean with the definition adjustment, a fresh
    source-type error, then binomial counts. Entities unseen in training get
    fresh effects and trends from the fitted scales.
    """
    train_ids = {o.id for o in inputs.observations}
    clash = [o.id for o in test if o.id in train_ids]
    if clash:
        raise LeakageError(f"test observations also present in training: {clash[:5]}")

    h = inputs.index
    basis = build_basis(h.year_min, h.year_max)
    layout = draws.layout
    flat = draws.stacked()
    n = len(flat)
    rng = np.random.default_rng(seed)
    fresh = _FreshEffects(flat, layout, basis, rng)
    lam = flat[:, layout.log_sigma]

    results = []
    for o in test:
        t = o.grid_year(h.year_min, h.year_max)
        mu = flat[:, layout.beta0.start].copy()

        if o.region in h.region_index:
            mu += flat[:, layout.beta_r.start + h.region_index[o.region]]
        else:
            mu += fresh.region(o.region)
        if o.country in h.country_index:
            mu += flat[:, layout.beta_c.start + h.country_index[o.country]]
        else:
            mu += fresh.country(o.country)

        if o.place in h.place_index:
            p = h.place_index[o.place]
            col = layout.beta_p_col[p]
            if col >= 0:
                mu += flat[:, layout.beta_p.start + col]
            k = layout.n_free_coef
            u = flat[:, layout.u.start + p * k:layout.u.start + (p + 1) * k]
            mu += u @ basis.BZ[t - h.year_min]
        else:
            mu += fresh.place(o.place)
            mu += fresh.trend(o.place) @ basis.B[t - h.year_min]

        mu += (flat[:, layout.beta_nmr.start]
               * np.log(inputs.covariates.nmr_point[(o.country, t)]))

        code = _gamma_code(o)
        if code == 1:
            mu += flat[:, layout.gamma_early_hic.start]
        elif code == 2:
            mu += flat[:, layout.gamma_early_lmic.start]

        if o.source_type is not SourceType.CRVS:
            slot = _EPS_SLOT[o.source_type]
            mu = mu + rng.standard_normal(n) * np.exp(lam[:, slot])

        sim = rng.binomial(o.n, expit(mu)) / o.n
        lo, med, hi = np.quantile(sim, [0.025, 0.5, 0.975])
        observed = o.y / o.n
        results.append((o, abs(med - observed), bool(lo <= observed <= hi)))
    return results


def build_report(scored) -> ValidationReport:
    if not scored:
        raise EmptyTest("nothing to score")

    def row(label, triples):
        errs = [e for _, e, _ in triples]
        covs = [c for _, _, c in triples]
        return ReportRow(region=label, mae=float(np.mean(errs)),
                         coverage95=float(np.mean(covs)), n=len(triples))

    by_region = {}
    for triple in scored:
        by_region.setdefault(triple[0].region, []).append(triple)
    rows = [row(GLOBAL_LABEL, scored)]
    rows += [row(region, by_region[region]) for region in sorted(by_region)]
    return ValidationReport(rows=rows)


def score(test, draws, inputs: ModelInputs, seed=0) -> ValidationReport:
    """Score held-out observations and tabulate by region plus a pooled row."""
    return build_report(score_observations(test, draws, inputs, seed=seed))
