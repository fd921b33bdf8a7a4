"""Domain types, hierarchy indexing, and ingestion of the input files.

Input files are UTF-8 comma-delimited text with a header row:

* observations: ``id,country,place,region,year_start,year_end,y,z,source_type,definition,income_group``
* auxiliary definition pairs: ``aux_country,definition,y,z,income_group``
* NMR / total-stillbirth samples: ``country,year,sample_index,value`` in long
  format; in the NMR file ``sample_index`` 0 is the point estimate and
  1..J are posterior samples, in the stillbirth file only samples appear.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import HierarchyConflict, MalformedRecord, MissingCovariate

OBS_FILE = "observations.csv"
AUX_FILE = "aux.csv"
NMR_FILE = "nmr.csv"
SBR_FILE = "sbr.csv"

OBS_COLUMNS = [
    "id", "country", "place", "region", "year_start", "year_end",
    "y", "z", "source_type", "definition", "income_group",
]
AUX_COLUMNS = ["aux_country", "definition", "y", "z", "income_group"]
SAMPLE_COLUMNS = ["country", "year", "sample_index", "value"]


class SourceType(str, Enum):
    CRVS = "crvs"
    HEALTH_FACILITY = "health_facility"
    HMIS = "hmis"
    POPULATION_STUDY = "population_study"


class Definition(str, Enum):
    EARLY = "early"
    LATE = "late"
    UNDEFINED = "undefined"


class IncomeGroup(str, Enum):
    HIC = "hic"
    LMIC = "lmic"


@dataclass(frozen=True)
class Observation:
    """One data point: classified stillbirth counts for a place and year span."""

    id: int
    y: int  # intrapartum count
    z: int  # antepartum count
    country: str
    place: str
    region: str
    year_start: float
    year_end: float
    source_type: SourceType
    definition: Definition
    income_group: IncomeGroup

    @property
    def n(self) -> int:
        return self.y + self.z

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.year_start + self.year_end)

    @property
    def year_fraction(self) -> float:
        """Fraction of a year covered; a degenerate span counts as one full year."""
        span = self.year_end - self.year_start
        return span if span > 0 else 1.0

    def grid_year(self, year_min: int, year_max: int) -> int:
        """Nearest integer grid year to the span midpoint, ties broken downward.

        A full calendar year stored as [t, t+1) has midpoint t+0.5 and maps
        to t under the downward tie break.
        """
        t = int(math.ceil(self.midpoint - 0.5))
        return min(max(t, year_min), year_max)


@dataclass(frozen=True)
class AuxObservation:
    """Paired-definition stillbirth counts that inform only the definition adjustment."""

    aux_country: str
    y: int
    z: int
    definition: Definition
    income_group: IncomeGroup

    @property
    def n(self) -> int:
        return self.y + self.z


@dataclass(eq=False)
class CovariateTables:
    """Neonatal-mortality and total-stillbirth inputs keyed by (country, year)."""

    nmr_point: dict
    nmr_samples: dict
    sbr_samples: dict
    n_samples: int

    def __eq__(self, other):
        if not isinstance(other, CovariateTables):
            return NotImplemented
        if self.n_samples != other.n_samples:
            return False
        if self.nmr_point != other.nmr_point:
            return False
        for mine, theirs in ((self.nmr_samples, other.nmr_samples),
                             (self.sbr_samples, other.sbr_samples)):
            if mine.keys() != theirs.keys():
                return False
            if any(not np.array_equal(mine[k], theirs[k]) for k in mine):
                return False
        return True

    def countries(self):
        return sorted({c for c, _ in self.nmr_point})


@dataclass(eq=False)
class Hierarchy:
    """Dense indices for regions, countries, places, plus the year grid."""

    regions: tuple
    countries: tuple
    places: tuple
    region_index: dict
    country_index: dict
    place_index: dict
    place_country: np.ndarray  # (P,) country index per place
    country_region: np.ndarray  # (C,) region index per country
    single_place: np.ndarray  # (C,) bool, exactly one place with data
    year_min: int
    year_max: int

    @property
    def n_regions(self):
        return len(self.regions)

    @property
    def n_countries(self):
        return len(self.countries)

    @property
    def n_places(self):
        return len(self.places)

    @property
    def n_coef(self):
        """Cubic B-spline coefficient count on the integer-year grid."""
        return self.year_max - self.year_min + 3

    @property
    def years(self):
        return np.arange(self.year_min, self.year_max + 1)

    def __eq__(self, other):
        if not isinstance(other, Hierarchy):
            return NotImplemented
        return (
            self.regions == other.regions
            and self.countries == other.countries
            and self.places == other.places
            and np.array_equal(self.place_country, other.place_country)
            and np.array_equal(self.country_region, other.country_region)
            and np.array_equal(self.single_place, other.single_place)
            and (self.year_min, self.year_max) == (other.year_min, other.year_max)
        )


@dataclass(eq=False)
class ModelInputs:
    """Validated, indexed dataset; immutable after construction."""

    observations: tuple
    aux: tuple
    covariates: CovariateTables
    index: Hierarchy
    undefined_definition: str = "treat_as_late"

    def __eq__(self, other):
        if not isinstance(other, ModelInputs):
            return NotImplemented
        return (
            self.observations == other.observations
            and self.aux == other.aux
            and self.covariates == other.covariates
            and self.index == other.index
            and self.undefined_definition == other.undefined_definition
        )

    def grid_years(self):
        """Per-observation integer grid year."""
        h = self.index
        return np.array([o.grid_year(h.year_min, h.year_max) for o in self.observations])


def build_hierarchy(observations, window=None) -> Hierarchy:
    """Assign dense indices and detect single-place countries.

    Raises HierarchyConflict when a place maps to two countries or a
    country to two regions.
    """
    if not observations:
        raise ValueError("cannot build a hierarchy from an empty observation list")

    place_to_country = {}
    country_to_region = {}
    for o in observations:
        prev = place_to_country.setdefault(o.place, o.country)
        if prev != o.country:
            raise HierarchyConflict(
                f"place '{o.place}' mapped to both '{prev}' and '{o.country}'")
        prev_r = country_to_region.setdefault(o.country, o.region)
        if prev_r != o.region:
            raise HierarchyConflict(
                f"country '{o.country}' mapped to regions '{prev_r}' and '{o.region}'")

    regions = tuple(sorted(set(country_to_region.values())))
    countries = tuple(sorted(country_to_region))
    places = tuple(sorted(place_to_country))
    region_index = {r: i for i, r in enumerate(regions)}
    country_index = {c: i for i, c in enumerate(countries)}
    place_index = {p: i for i, p in enumerate(places)}

    place_country = np.array([country_index[place_to_country[p]] for p in places])
    country_region = np.array([region_index[country_to_region[c]] for c in countries])

    places_per_country = np.zeros(len(countries), dtype=int)
    for ci in place_country:
        places_per_country[ci] += 1
    single_place = places_per_country == 1

    if window is None:
        lo = int(math.floor(min(o.year_start for o in observations)))
        hi = int(math.ceil(max(o.year_end for o in observations))) - 1
        window = (lo, max(hi, lo))

    return Hierarchy(
        regions=regions,
        countries=countries,
        places=places,
        region_index=region_index,
        country_index=country_index,
        place_index=place_index,
        place_country=place_country,
        country_region=country_region,
        single_place=single_place,
        year_min=int(window[0]),
        year_max=int(window[1]),
    )


def _parse_header(path, header, expected):
    if header != expected:
        raise MalformedRecord(path, 1, "header",
                              f"expected columns {expected}, got {header}")


def _to_int(path, line, name, raw, minimum=None):
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise MalformedRecord(path, line, name, f"not an integer: {raw!r}") from None
    if minimum is not None and value < minimum:
        raise MalformedRecord(path, line, name, f"must be >= {minimum}, got {value}")
    return value


def _to_float(path, line, name, raw):
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise MalformedRecord(path, line, name, f"not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise MalformedRecord(path, line, name, f"not finite: {raw!r}")
    return value


def _to_enum(path, line, name, raw, enum_cls):
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise MalformedRecord(path, line, name,
                              f"{raw!r} not one of: {allowed}") from None


def _read_rows(path, expected_columns):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRecord(path, 1, "header", "empty file") from None
        _parse_header(path, header, expected_columns)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_columns):
                raise MalformedRecord(path, line, "row",
                                      f"expected {len(expected_columns)} fields, got {len(row)}")
            yield line, row


def read_observations(path, window):
    year_min, year_max = window
    observations = []
    for line, row in _read_rows(path, OBS_COLUMNS):
        (raw_id, country, place, region, ys, ye, y, z, st, de, ig) = row
        obs = Observation(
            id=_to_int(path, line, "id", raw_id),
            country=country,
            place=place,
            region=region,
            year_start=_to_float(path, line, "year_start", ys),
            year_end=_to_float(path, line, "year_end", ye),
            y=_to_int(path, line, "y", y, minimum=0),
            z=_to_int(path, line, "z", z, minimum=0),
            source_type=_to_enum(path, line, "source_type", st, SourceType),
            definition=_to_enum(path, line, "definition", de, Definition),
            income_group=_to_enum(path, line, "income_group", ig, IncomeGroup),
        )
        if obs.n < 1:
            raise MalformedRecord(path, line, "y",
                                  "observation has no classified stillbirths (y + z = 0)")
        if obs.year_start > obs.year_end:
            raise MalformedRecord(path, line, "year_start",
                                  f"year_start {obs.year_start} after year_end {obs.year_end}")
        # year_end may reach year_max + 1 so a full final calendar year fits.
        if obs.year_start < year_min or obs.year_end > year_max + 1:
            raise MalformedRecord(path, line, "year_start",
                                  f"span [{obs.year_start}, {obs.year_end}] outside "
                                  f"window [{year_min}, {year_max + 1}]")
        observations.append(obs)
    return observations


def read_aux(path):
    records = []
    for line, row in _read_rows(path, AUX_COLUMNS):
        aux_country, de, y, z, ig = row
        definition = _to_enum(path, line, "definition", de, Definition)
        if definition is Definition.UNDEFINED:
            raise MalformedRecord(path, line, "definition",
                                  "auxiliary records must be early or late")
        rec = AuxObservation(
            aux_country=aux_country,
            y=_to_int(path, line, "y", y, minimum=0),
            z=_to_int(path, line, "z", z, minimum=0),
            definition=definition,
            income_group=_to_enum(path, line, "income_group", ig, IncomeGroup),
        )
        if rec.n < 1:
            raise MalformedRecord(path, line, "y", "auxiliary record has y + z = 0")
        records.append(rec)

    with_late = {r.aux_country for r in records if r.definition is Definition.LATE}
    for r in records:
        if r.aux_country not in with_late:
            raise MalformedRecord(path, 0, "aux_country",
                                  f"'{r.aux_country}' has no late-definition record")
    return records


def _read_sample_table(path, with_point):
    points = {}
    samples = {}
    for line, row in _read_rows(path, SAMPLE_COLUMNS):
        country, year_raw, idx_raw, value_raw = row
        year = _to_int(path, line, "year", year_raw)
        idx = _to_int(path, line, "sample_index", idx_raw, minimum=0)
        value = _to_float(path, line, "value", value_raw)
        if value <= 0:
            raise MalformedRecord(path, line, "value", f"must be positive, got {value}")
        key = (country, year)
        if idx == 0:
            if not with_point:
                raise MalformedRecord(path, line, "sample_index",
                                      "sample_index 0 is reserved for the NMR point estimate")
            if key in points:
                raise MalformedRecord(path, line, "sample_index",
                                      f"duplicate point estimate for {key}")
            points[key] = value
        else:
            cell = samples.setdefault(key, {})
            if idx in cell:
                raise MalformedRecord(path, line, "sample_index",
                                      f"duplicate sample {idx} for {key}")
            cell[idx] = value

    vectors = {}
    length = None
    for key, cell in samples.items():
        indices = sorted(cell)
        if indices != list(range(1, len(indices) + 1)):
            raise MalformedRecord(path, 0, "sample_index",
                                  f"samples for {key} are not contiguous 1..J: {indices[:5]}...")
        if length is None:
            length = len(indices)
        elif len(indices) != length:
            raise MalformedRecord(path, 0, "sample_index",
                                  f"{key} has {len(indices)} samples, expected {length}")
        vectors[key] = np.array([cell[i] for i in indices])

    if with_point and points.keys() != vectors.keys():
        missing = set(points) ^ set(vectors)
        raise MalformedRecord(path, 0, "sample_index",
                              f"point/sample coverage differs at {sorted(missing)[:5]}")
    return points, vectors, length or 0


def read_covariates(nmr_path, sbr_path):
    nmr_point, nmr_samples, nmr_j = _read_sample_table(nmr_path, with_point=True)
    _, sbr_samples, sbr_j = _read_sample_table(sbr_path, with_point=False)
    if nmr_j != sbr_j:
        raise MalformedRecord(sbr_path, 0, "sample_index",
                              f"sample vectors disagree on length: NMR J={nmr_j}, "
                              f"stillbirth J={sbr_j}")
    return CovariateTables(nmr_point=nmr_point, nmr_samples=nmr_samples,
                           sbr_samples=sbr_samples, n_samples=nmr_j)


def check_coverage(covariates, countries, window):
    """Every modeled country-year needs NMR point, NMR samples, and stillbirth samples."""
    year_min, year_max = window
    for country in countries:
        for year in range(year_min, year_max + 1):
            key = (country, year)
            if key not in covariates.nmr_point or key not in covariates.nmr_samples:
                raise MissingCovariate(f"no NMR estimate for {country} in {year}")
            if key not in covariates.sbr_samples:
                raise MissingCovariate(f"no stillbirth samples for {country} in {year}")


def load_inputs(obs_path, aux_path, nmr_path, sbr_path, window,
                undefined_definition="treat_as_late") -> ModelInputs:
    """Read, validate, and index the four input files."""
    if undefined_definition not in ("treat_as_late", "exclude"):
        raise ValueError(f"unknown undefined_definition policy: {undefined_definition!r}")

    observations = read_observations(obs_path, window)
    if undefined_definition == "exclude":
        observations = [o for o in observations
                        if o.definition is not Definition.UNDEFINED]
    if not observations:
        raise MalformedRecord(obs_path, 0, "definition",
                              "no observations left after filtering")
    aux = read_aux(aux_path)
    covariates = read_covariates(nmr_path, sbr_path)
    hierarchy = build_hierarchy(observations, window)
    check_coverage(covariates, hierarchy.countries, window)

    return ModelInputs(
        observations=tuple(observations),
        aux=tuple(aux),
        covariates=covariates,
        index=hierarchy,
        undefined_definition=undefined_definition,
    )


def _fmt(value):
    return repr(float(value)) if isinstance(value, float) else str(value)


def atomic_write_text(path, text):
    """Write via a temp file and rename, so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_observations(observations, path):
    rows = [",".join(OBS_COLUMNS)]
    for o in observations:
        rows.append(",".join([
            str(o.id), o.country, o.place, o.region,
            _fmt(o.year_start), _fmt(o.year_end), str(o.y), str(o.z),
            o.source_type.value, o.definition.value, o.income_group.value,
        ]))
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_aux(aux, path):
    rows = [",".join(AUX_COLUMNS)]
    for r in aux:
        rows.append(",".join([r.aux_country, r.definition.value,
                              str(r.y), str(r.z), r.income_group.value]))
    atomic_write_text(path, "\n".join(rows) + "\n")


def _write_sample_table(points, samples, path):
    rows = [",".join(SAMPLE_COLUMNS)]
    for (country, year) in sorted(samples):
        if points is not None:
            rows.append(f"{country},{year},0,{_fmt(points[(country, year)])}")
        for i, value in enumerate(samples[(country, year)], start=1):
            rows.append(f"{country},{year},{i},{_fmt(value)}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_inputs(inputs, directory):
    """Serialize to the canonical four files; inverse of load_inputs."""
    os.makedirs(directory, exist_ok=True)
    cov = inputs.covariates
    write_observations(inputs.observations, os.path.join(directory, OBS_FILE))
    write_aux(inputs.aux, os.path.join(directory, AUX_FILE))
    _write_sample_table(cov.nmr_point, cov.nmr_samples, os.path.join(directory, NMR_FILE))
    _write_sample_table(None, cov.sbr_samples, os.path.join(directory, SBR_FILE))
    return {
        "observations": os.path.join(directory, OBS_FILE),
        "aux": os.path.join(directory, AUX_FILE),
        "nmr": os.path.join(directory, NMR_FILE),
        "sbr": os.path.join(directory, SBR_FILE),
    }


def load_directory(directory, window, undefined_definition="treat_as_late"):
    """Load the four canonical files from one directory."""
    return load_inputs(
        os.path.join(directory, OBS_FILE),
        os.path.join(directory, AUX_FILE),
        os.path.join(directory, NMR_FILE),
        os.path.join(directory, SBR_FILE),
        window,
        undefined_definition=undefined_definition,
    )


def subset_observations(inputs, keep) -> ModelInputs:
    """New ModelInputs restricted to ``keep``; hierarchy rebuilt, covariates kept whole."""
    keep = tuple(keep)
    hierarchy = build_hierarchy(list(keep), (inputs.index.year_min, inputs.index.year_max))
    check_coverage(inputs.covariates, hierarchy.countries,
                   (hierarchy.year_min, hierarchy.year_max))
    return ModelInputs(
        observations=keep,
        aux=inputs.aux,
        covariates=inputs.covariates,
        index=hierarchy,
        undefined_definition=inputs.undefined_definition,
    )
