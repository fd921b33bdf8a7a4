"""Region-level series as stillbirth-count-weighted means of country series.

Per draw and year the region value is sum(country proportion * stillbirth
samples) / sum(stillbirth samples); quantiles are always taken after
aggregation, never aggregated themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DrawMismatch, EmptyRegion, MissingSBR


@dataclass
class RegionEstimate:
    region: str
    years: np.ndarray
    samples: np.ndarray  # (n draws, n years)

    @property
    def name(self):
        return self.region


def aggregate_region(countries, sbr, region_map, region=None) -> RegionEstimate:
    """Aggregate the given country estimates into one region series.

    ``region_map`` maps country code to region; all supplied estimates must
    belong to one region unless ``region`` overrides the label.
    """
    if not countries:
        raise EmptyRegion("no country estimates supplied")
    if region is None:
        labels = {region_map[ce.country] for ce in countries}
        if len(labels) != 1:
            raise DrawMismatch(f"country estimates span regions {sorted(labels)}")
        region = labels.pop()

    years = countries[0].years
    shape = countries[0].samples.shape
    for ce in countries:
        if ce.samples.shape != shape or not np.array_equal(ce.years, years):
            raise DrawMismatch(
                f"country '{ce.country}' does not share draw/year indexing")

    n_draws = shape[0]
    n_samples = next(iter(sbr.sbr_samples.values())).shape[0]
    rows = np.arange(n_draws) % n_samples

    numerator = np.zeros(shape)
    denominator = np.zeros(shape)
    for ce in countries:
        try:
            counts = np.stack(
                [sbr.sbr_samples[(ce.country, int(t))] for t in years], axis=1)
        except KeyError as err:
            raise MissingSBR(
                f"no stillbirth samples for {ce.country} in {err.args[0][1]}") from None
        paired = counts[rows]
        numerator += ce.samples * paired
        denominator += paired
    return RegionEstimate(region=region, years=np.asarray(years),
                          samples=numerator / denominator)


def aggregate_regions(countries, sbr, region_map) -> list:
    """Group country estimates by region and aggregate each; sorted by region."""
    groups = {}
    for ce in countries:
        groups.setdefault(region_map[ce.country], []).append(ce)
    return [aggregate_region(groups[r], sbr, region_map, region=r)
            for r in sorted(groups)]


def aggregate_global(countries, sbr, label="global") -> RegionEstimate:
    """Aggregate every country estimate into a single world series."""
    region_map = {ce.country: label for ce in countries}
    return aggregate_region(countries, sbr, region_map, region=label)
