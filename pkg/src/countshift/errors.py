"""Exception hierarchy shared by all modules (and mapped to CLI exit codes)."""


class CountShiftError(Exception):
    """Base class for library errors."""


class InvalidShapeError(CountShiftError, ValueError):
    """Array extents are incompatible with the requested operation."""


class InvalidArgumentError(CountShiftError, ValueError):
    """A scalar argument is outside its valid range."""


class MalformedDatasetError(CountShiftError):
    """A dataset on disk violates the documented layout."""


class TrainingDivergedError(CountShiftError, FloatingPointError):
    """A non-finite value appeared in a loss, gradient or parameter."""
