"""Exception types shared across the package."""


class IpsbError(Exception):
    """Base class for all errors raised by this package."""


class MalformedRecord(IpsbError):
    """An input file record fails validation."""

    def __init__(self, path, line, field, message):
        super().__init__(f"{path}:{line}: field '{field}': {message}")
        self.path = path
        self.line = line
        self.field = field


class MissingCovariate(IpsbError):
    """A modeled country-year has no NMR or total-stillbirth coverage."""


class HierarchyConflict(IpsbError):
    """A place maps to two countries, or a country to two regions."""


class WindowTooShort(IpsbError):
    """Estimation window too narrow to carry a cubic spline basis."""


class OutOfWindow(IpsbError):
    """Evaluation time outside the estimation window."""


class NonFiniteDensity(IpsbError):
    """Log density or gradient is not finite; names the offending term."""

    def __init__(self, term, message=""):
        super().__init__(f"non-finite log density in term '{term}' {message}".rstrip())
        self.term = term


class GradientCheckFailed(IpsbError):
    """Analytic gradient disagrees with finite differences."""


class DivergenceStorm(IpsbError):
    """More than 10% of post-warmup transitions diverged."""


class InsufficientDraws(IpsbError):
    """Too few chains or draws for a diagnostic."""


class MissingSBR(IpsbError):
    """No total-stillbirth samples for a country-year used in weighting."""


class UnknownPlace(IpsbError):
    """Place has no sampled parameters."""


class DrawMismatch(IpsbError):
    """Posterior sample objects do not share draw indexing."""


class EmptyRegion(IpsbError):
    """No country estimates supplied for a region."""


class EmptyTrain(IpsbError):
    """A data split left the training set empty."""


class EmptyTest(IpsbError):
    """A data split left the test set empty."""


class TooFewObservations(IpsbError):
    """Not enough observations to form the requested folds."""


class InvalidConfig(IpsbError):
    """A scenario or sampler configuration violates its invariants."""


class LeakageError(IpsbError):
    """A held-out observation is also present in the training data."""
