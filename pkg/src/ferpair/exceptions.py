"""Exception hierarchy. The CLI maps each family to a distinct exit code."""


class FerpairError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FerpairError, ValueError):
    """Invalid configuration or parameters."""


class DataError(FerpairError, ValueError):
    """Malformed or inconsistent input data."""


class FeatureFileError(DataError):
    """A feature file row could not be parsed.

    ``row`` is the 1-based physical line number in the file (header lines
    included), or ``None`` for file-level problems.
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericError(FerpairError, ArithmeticError):
    """A loss or gradient became non-finite."""
