"""Exception hierarchy shared by every module in the package."""


class BayesSLError(Exception):
    """Base class for all package errors."""


class DimensionError(BayesSLError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class UsageError(BayesSLError, ValueError):
    """An API was called with arguments outside its contract."""


class TrainingError(BayesSLError, FloatingPointError):
    """Training produced non-finite values.

    ``details`` carries whatever breakdown the raiser had at hand, e.g. the
    offending parameter name or the individual loss components.
    """

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class DataError(BayesSLError, ValueError):
    """Labels or data values are outside their valid range."""


class FormatError(BayesSLError, ValueError):
    """A binary file does not match its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(BayesSLError, ValueError):
    """An experiment configuration is invalid or infeasible."""
