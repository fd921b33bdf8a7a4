import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from ipsb.data_model import (AuxObservation, Definition, IncomeGroup,
                             ModelInputs, SourceType)
from ipsb.errors import NonFiniteDensity
from ipsb.posterior import (LogPosterior, ParameterVector, build_layout,
                            gradient_check, inv_logit, log_posterior, logit,
                            mu_of_observation, SIGMA_NAMES)
from ipsb.splines import build_basis
from ipsb.synthetic import ScenarioConfig, generate

from conftest import make_inputs, make_obs


def zero_params(inputs):
    layout = build_layout(inputs)
    return ParameterVector(data=np.zeros(layout.size), layout=layout)


def prior_logdensity_at_zero(inputs):
    """Hand-summed prior log densities at the all-zero parameter vector.

    Every scale is exp(0) = 1 there. Gaussian blocks contribute their logpdf
    at zero; each log-scale entry contributes the half-Normal(0,1) density at
    sigma = 1 plus a zero Jacobian term.
    """
    layout = build_layout(inputs)
    h = inputs.index
    norm01 = stats.norm(0, 1).logpdf(0.0)
    n_eps = layout.epsilon.stop - layout.epsilon.start
    n_free_bp = layout.beta_p.stop - layout.beta_p.start
    n_aux_countries = len(layout.nu_countries)

    total = norm01  # beta0
    total += h.n_regions * norm01
    total += h.n_countries * norm01
    total += n_free_bp * norm01
    total += h.n_places * (h.n_coef - 1) * norm01  # spline differences
    total += n_eps * norm01
    total += 2 * norm01  # both definition adjustments at sigma_gamma = 1
    total += n_aux_countries * stats.norm(0, 10).logpdf(0.0)
    total += len(SIGMA_NAMES) * stats.halfnorm(0, 1).logpdf(1.0)
    return total


class TestInvLogit:
    def test_half_at_zero(self):
        assert inv_logit(0.0) == 0.5

    def test_round_trip(self):
        assert logit(inv_logit(3.7)) == pytest.approx(3.7, abs=1e-12)

    def test_symmetry(self):
        for x in (0.3, 2.0, 35.0, 700.0):
            assert inv_logit(-x) == pytest.approx(1.0 - inv_logit(x), abs=1e-15)

    def test_no_underflow_to_zero(self):
        assert inv_logit(-745.0) > 0.0

    def test_vectorized(self):
        x = np.array([-1.0, 0.0, 1.0])
        np.testing.assert_allclose(inv_logit(x), [1 / (1 + math.e), 0.5,
                                                  math.e / (1 + math.e)])


class TestMeanModel:
    def test_all_zero_parameters(self):
        inputs = make_inputs([make_obs()], nmr=1.0)
        params = zero_params(inputs)
        assert mu_of_observation(params, inputs.observations[0], inputs) == 0.0

    def test_late_definition_ignores_early_adjustment(self):
        inputs = make_inputs([make_obs(definition=Definition.LATE)])
        params = zero_params(inputs)
        base = mu_of_observation(params, inputs.observations[0], inputs)
        params.set("gamma_early_hic", 5.0)
        assert mu_of_observation(params, inputs.observations[0], inputs) == base

    def test_early_definition_adds_income_group_adjustment(self):
        obs_h = make_obs(id=1, definition=Definition.EARLY,
                         income_group=IncomeGroup.HIC)
        obs_l = make_obs(id=2, definition=Definition.EARLY,
                         income_group=IncomeGroup.LMIC)
        inputs = make_inputs([obs_h, obs_l], nmr=1.0)
        params = zero_params(inputs)
        params.set("gamma_early_hic", 0.31)
        params.set("gamma_early_lmic", 0.45)
        assert mu_of_observation(params, obs_h, inputs) == pytest.approx(0.31)
        assert mu_of_observation(params, obs_l, inputs) == pytest.approx(0.45)

    def test_term_sum_oracle(self):
        obs = make_obs(source_type=SourceType.HMIS, year_start=2001.0,
                       year_end=2002.0)
        inputs = make_inputs([obs], nmr=12.0)
        layout = build_layout(inputs)
        rng = np.random.default_rng(8)
        params = ParameterVector(rng.normal(0, 0.5, layout.size), layout)
        basis = build_basis(2000, 2003)

        # independent term-by-term summation
        expected = (params.get("beta0")[0]
                    + params.get("beta_r")[0]
                    + params.get("beta_c")[0]
                    # single place in its country: structural zero
                    + params.get("beta_nmr")[0] * math.log(12.0)
                    + float(basis.BZ[1] @ params.get("u")))
        assert layout.beta_p_col[0] == -1
        assert mu_of_observation(params, obs, inputs) == pytest.approx(expected,
                                                                       abs=1e-12)

    def test_structural_zero_skipped_for_multi_place(self):
        obs = [make_obs(id=1, place="P1"), make_obs(id=2, place="P2")]
        inputs = make_inputs(obs)
        layout = build_layout(inputs)
        assert layout.beta_p_col == (0, 1)


class TestLogPosteriorValue:
    def test_empty_observations_closed_form(self):
        template = make_inputs([make_obs()])
        empty = ModelInputs(observations=(), aux=(),
                            covariates=template.covariates,
                            index=template.index)
        params = zero_params(empty)
        result = log_posterior(params, empty)
        assert result.value == pytest.approx(prior_logdensity_at_zero(empty),
                                             abs=1e-9)
        assert len(result.gradient) == params.layout.size

    def test_empty_observations_with_aux_closed_form(self):
        aux = (AuxObservation("A1", 3, 7, Definition.LATE, IncomeGroup.HIC),
               AuxObservation("A1", 5, 5, Definition.EARLY, IncomeGroup.HIC))
        template = make_inputs([make_obs()], aux=aux)
        empty = ModelInputs(observations=(), aux=aux,
                            covariates=template.covariates,
                            index=template.index)
        params = zero_params(empty)
        # at zero every aux proportion is 1/2
        aux_term = sum(
            gammaln(a.n + 1) - gammaln(a.y + 1) - gammaln(a.z + 1)
            + a.n * math.log(0.5) for a in aux)
        expected = prior_logdensity_at_zero(empty) + aux_term
        assert log_posterior(params, empty).value == pytest.approx(expected,
                                                                   abs=1e-9)

    def test_binomial_term_at_half(self):
        # y=3, z=7 at phi = 1/2: log C(10,3) + 10 log(1/2)
        inputs = make_inputs([make_obs(y=3, z=7)], nmr=1.0)
        params = zero_params(inputs)
        value = log_posterior(params, inputs).value
        expected_lik = (math.log(math.comb(10, 3)) + 10 * math.log(0.5))
        assert value - prior_logdensity_at_zero(inputs) == pytest.approx(
            expected_lik, abs=1e-9)

    def test_aux_likelihood_uses_nu_and_gamma(self):
        aux = (AuxObservation("A1", 4, 6, Definition.LATE, IncomeGroup.LMIC),
               AuxObservation("A1", 6, 4, Definition.EARLY, IncomeGroup.LMIC))
        inputs = make_inputs([make_obs()], aux=aux, nmr=1.0)
        layout = build_layout(inputs)
        params = ParameterVector(np.zeros(layout.size), layout)
        params.set("nu", 0.4)
        params.set("gamma_early_lmic", 0.3)
        value = log_posterior(params, inputs).value

        def binom_logit(y, n, x):
            return (gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
                    + y * x - n * np.logaddexp(0, x))

        oracle = (binom_logit(5, 20, 0.0)  # the main observation at mu = 0
                  + binom_logit(4, 10, 0.4)
                  + binom_logit(6, 10, 0.7)
                  + stats.norm(0, 1).logpdf(0.0) * (
                      1 + 1 + 1 + 0 + (inputs.index.n_coef - 1))
                  + stats.norm(0, 10).logpdf(0.4)
                  + stats.norm(0, 1).logpdf(0.0)  # gamma hic
                  + stats.norm(0, 1).logpdf(0.3)  # gamma lmic centered at hic
                  + len(SIGMA_NAMES) * stats.halfnorm(0, 1).logpdf(1.0))
        assert value == pytest.approx(oracle, abs=1e-9)

    def test_order_invariance(self):
        config = ScenarioConfig(regions=2, countries_per_region=2,
                                years=(2000, 2004), seed=9, n_samples=5)
        inputs, _ = generate(config)
        ev = LogPosterior(inputs)
        rng = np.random.default_rng(1)
        theta = rng.normal(0, 0.4, ev.dim)
        v1, g1 = ev.value_and_grad(theta)

        perm = rng.permutation(len(inputs.observations))
        shuffled = ModelInputs(
            observations=tuple(inputs.observations[i] for i in perm),
            aux=inputs.aux, covariates=inputs.covariates, index=inputs.index)
        ev2 = LogPosterior(shuffled)
        # epsilon entries follow observation order; remap by observation id
        theta2 = theta.copy()
        source = {oid: k for k, oid in enumerate(ev.layout.eps_obs_ids)}
        eps = theta[ev.layout.epsilon]
        for k, oid in enumerate(ev2.layout.eps_obs_ids):
            theta2[ev2.layout.epsilon.start + k] = eps[source[oid]]
        v2, g2 = ev2.value_and_grad(theta2)
        assert v2 == pytest.approx(v1, rel=1e-12)

    def test_shift_between_intercepts_moves_only_priors(self):
        # one country: adding d to beta_c and -d to beta0 keeps the likelihood
        inputs = make_inputs([make_obs(y=4, z=8, source_type=SourceType.CRVS)])
        layout = build_layout(inputs)
        rng = np.random.default_rng(3)
        base = rng.normal(0, 0.3, layout.size)
        ev = LogPosterior(inputs)
        d = 0.7
        shifted = base.copy()
        shifted[layout.beta0.start] -= d
        shifted[layout.beta_c.start] += d
        v1 = ev.value(base)
        v2 = ev.value(shifted)
        sig_c = math.exp(base[layout.log_sigma.start + SIGMA_NAMES.index("beta_c")])
        prior_move = (
            stats.norm(0, 1).logpdf(shifted[layout.beta0.start])
            - stats.norm(0, 1).logpdf(base[layout.beta0.start])
            + stats.norm(0, sig_c).logpdf(shifted[layout.beta_c.start])
            - stats.norm(0, sig_c).logpdf(base[layout.beta_c.start]))
        assert v2 - v1 == pytest.approx(prior_move, abs=1e-9)

    def test_all_crvs_has_no_epsilon_entries(self):
        inputs = make_inputs([make_obs(id=i, source_type=SourceType.CRVS)
                              for i in range(4)])
        layout = build_layout(inputs)
        assert layout.epsilon.stop == layout.epsilon.start
        assert layout.eps_obs_ids == ()

    def test_non_crvs_sources_get_epsilon(self):
        inputs = make_inputs([
            make_obs(id=1, source_type=SourceType.CRVS),
            make_obs(id=2, source_type=SourceType.HMIS),
            make_obs(id=3, source_type=SourceType.POPULATION_STUDY),
        ])
        layout = build_layout(inputs)
        assert layout.eps_obs_ids == (2, 3)

    def test_nonfinite_reports_term_name(self):
        inputs = make_inputs([make_obs()])
        layout = build_layout(inputs)
        params = ParameterVector(np.zeros(layout.size), layout)
        params.set("log_sigma", np.full(len(SIGMA_NAMES), 400.0))
        with pytest.raises(NonFiniteDensity) as err:
            log_posterior(params, inputs)
        assert err.value.term == "sigma_priors"


class TestGradient:
    def test_two_country_toy_matches_finite_differences(self):
        obs = [
            make_obs(id=1, country="C1", place="P1", y=4, z=9),
            make_obs(id=2, country="C1", place="P2", y=2, z=5,
                     source_type=SourceType.HMIS),
            make_obs(id=3, country="C2", place="P3", y=7, z=3,
                     source_type=SourceType.POPULATION_STUDY,
                     definition=Definition.EARLY),
        ]
        aux = (AuxObservation("A1", 3, 7, Definition.LATE, IncomeGroup.LMIC),
               AuxObservation("A1", 5, 5, Definition.EARLY, IncomeGroup.LMIC))
        inputs = make_inputs(obs, aux=aux, nmr=15.0)
        ev = LogPosterior(inputs)
        rng = np.random.default_rng(12)
        theta = rng.normal(0, 0.5, ev.dim)
        _, grad = ev.value_and_grad(theta)
        step = 1e-5
        fd = np.empty(ev.dim)
        for k in range(ev.dim):
            theta[k] += step
            up = ev.value(theta)
            theta[k] -= 2 * step
            down = ev.value(theta)
            theta[k] += step
            fd[k] = (up - down) / (2 * step)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-7)

    def test_gradient_check_runner(self):
        config = ScenarioConfig(regions=2, countries_per_region=2,
                                years=(2000, 2004), seed=21, n_samples=5,
                                total_stillbirths=(50.0, 200.0))
        inputs, _ = generate(config)
        report = gradient_check(inputs, n_points=5, seed=0)
        assert report.passed, report
