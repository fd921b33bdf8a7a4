import numpy as np
import pytest

from ipsb.data_model import (CovariateTables, ModelInputs, Observation,
                             AuxObservation, Definition, IncomeGroup,
                             SourceType, build_hierarchy)
from ipsb.sampler import SamplerConfig, run_hmc
from ipsb.synthetic import ScenarioConfig, generate


def make_obs(id=1, y=5, z=15, country="C1", place="P1", region="R1",
             year_start=2001.0, year_end=2002.0, source_type=SourceType.CRVS,
             definition=Definition.LATE, income_group=IncomeGroup.HIC):
    return Observation(id=id, y=y, z=z, country=country, place=place,
                       region=region, year_start=year_start, year_end=year_end,
                       source_type=source_type, definition=definition,
                       income_group=income_group)


def make_covariates(countries, window, nmr=10.0, sbr=1000.0, n_samples=4):
    """Constant covariate tables covering every country-year in the window."""
    nmr_point, nmr_samples, sbr_samples = {}, {}, {}
    for c in countries:
        for t in range(window[0], window[1] + 1):
            nmr_point[(c, t)] = nmr
            nmr_samples[(c, t)] = np.full(n_samples, nmr, dtype=float)
            sbr_samples[(c, t)] = np.full(n_samples, sbr, dtype=float)
    return CovariateTables(nmr_point=nmr_point, nmr_samples=nmr_samples,
                           sbr_samples=sbr_samples, n_samples=n_samples)


def make_inputs(observations, aux=(), window=(2000, 2003), nmr=10.0,
                sbr=1000.0, n_samples=4):
    hierarchy = build_hierarchy(list(observations), window)
    covariates = make_covariates(hierarchy.countries, window, nmr=nmr,
                                 sbr=sbr, n_samples=n_samples)
    return ModelInputs(observations=tuple(observations), aux=tuple(aux),
                       covariates=covariates, index=hierarchy)


TINY_SCENARIO = ScenarioConfig(
    regions=2,
    countries_per_region=2,
    places_per_country=(1, 2),
    years=(2000, 2005),
    seed=11,
    total_stillbirths=(200.0, 800.0),
    n_samples=20,
    aux_countries=4,
    aux_counts=300,
)


@pytest.fixture(scope="session")
def tiny_fitted():
    """A small fitted model shared across tests that need real draws."""
    inputs, truth = generate(TINY_SCENARIO)
    draws = run_hmc(inputs, SamplerConfig(chains=2, warmup=400, samples=300,
                                          seed=5))
    return inputs, truth, draws
