"""Exception types raised across the package."""


class OccvoxError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OccvoxError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class ShapeError(OccvoxError, ValueError):
    pass


class DataError(OccvoxError, ValueError):
    """Raster or grid content violates its invariants (e.g. label >= M)."""


class StateError(OccvoxError, RuntimeError):
    """A cached forward state does not match the backward call."""


class UndefinedLossError(OccvoxError, ValueError):
    pass


class UndefinedMetricError(OccvoxError, ValueError):
    pass


class DegeneratePoseError(OccvoxError, ValueError):
    """The camera sits inside an occupied cell."""


class FormatError(OccvoxError, ValueError):
    """A file does not follow the expected on-disk layout."""
