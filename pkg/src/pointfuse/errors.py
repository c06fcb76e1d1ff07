"""Exception types shared across the package."""


class PointfuseError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(PointfuseError, ValueError):
    """An array argument has the wrong shape or size."""


class InvalidInputError(PointfuseError, ValueError):
    """An argument value is outside the operation's domain."""


class DataError(PointfuseError):
    """A file or configuration document is unreadable or malformed."""


class DegenerateCovarianceError(PointfuseError):
    """A covariance matrix carries no directional information."""


class StateError(PointfuseError):
    """An object is in the wrong state for the requested operation."""


class NumericError(PointfuseError):
    """A computation produced non-finite or otherwise unusable values."""
