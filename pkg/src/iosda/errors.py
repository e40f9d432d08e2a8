"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data problems -> 2,
numeric failures -> 3.
"""


class IosdaError(Exception):
    pass


class ShapeError(IosdaError, ValueError):
    """Array shapes do not agree with a network spec or with each other."""


class DataError(IosdaError):
    """Malformed, empty or inconsistent input data."""


class EmptyDatasetError(DataError):
    pass


class ConfigError(IosdaError):
    pass


class NumericError(IosdaError):
    """A loss or parameter became non-finite during training."""
