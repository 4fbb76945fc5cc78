"""Exception hierarchy shared by every padnet module."""


class PadNetError(Exception):
    """Base class for all errors raised by padnet."""


class DimensionError(PadNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(PadNetError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class UsageError(PadNetError, ValueError):
    """An API was called with arguments that violate its preconditions."""


class FormatError(PadNetError, ValueError):
    """A file on disk is malformed, truncated or of an unsupported kind."""


class DegenerateInputError(PadNetError, ValueError):
    """A statistic is undefined for the given data (e.g. a constant vector)."""
