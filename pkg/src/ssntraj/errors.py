"""Exception types shared across the package."""


class SsnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SsnError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(SsnError, ValueError):
    """An operation was invoked outside its contract (e.g. backward on a non-scalar)."""


class ValidationError(SsnError, ValueError):
    """A configuration or CLI value failed validation. Maps to exit status 1."""


class FormatError(SsnError, ValueError):
    """An on-disk artifact has a bad magic number, version, or record layout. Exit status 2."""


class TruncationError(FormatError):
    """An on-disk artifact ended before its declared payload."""


class IndexRangeError(FormatError):
    """A stored index range is out of bounds or violates the half-open discipline."""


class InsufficientFutureError(SsnError, ValueError):
    """Skip-sample signal: the frame lacks the requested number of future steps."""
