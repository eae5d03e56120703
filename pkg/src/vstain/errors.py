"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
ShapeError -> 3, NumericError -> 4.
"""


class VstainError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VstainError):
    """Dimension or channel mismatch between arrays."""


class ConfigError(VstainError):
    """Invalid configuration values or combinations."""


class DataError(VstainError):
    """Malformed files, missing paths, inconsistent manifests."""


class NumericError(VstainError):
    """Non-finite values or degenerate numeric input."""
