"""Exception hierarchy shared by the library and the command line tool."""


class SunProbitError(Exception):
    """Base class for all errors raised by this package."""


class NotFactorizable(SunProbitError):
    """A covariance matrix could not be Cholesky factored at any jitter level."""


class DimensionMismatch(SunProbitError, ValueError):
    pass


class DimensionTooLarge(SunProbitError):
    pass


class CapExceeded(SunProbitError):
    """Problem size is above a configured cap for the requested method."""


class InfeasibleRegion(SunProbitError):
    """The truncation region has (numerically) zero probability."""


class ToleranceNotMet(SunProbitError):
    """Raised by strict CDF evaluations whose error estimate exceeds the tolerance."""


class MaxTriesExceeded(SunProbitError):
    pass


class IndexOutOfRange(SunProbitError, IndexError):
    pass


class QOverCap(SunProbitError):
    pass


class ConfigError(SunProbitError):
    pass


class DataError(SunProbitError):
    """Problems with input data: malformed CSV, unknown labels, bad predictors."""


class MalformedCsv(DataError):
    pass


class UnknownLabel(DataError):
    pass


class NonNumericPredictor(DataError):
    pass
