"""Exception classes shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class SatslabError(Exception):
    """Base class for all package errors."""


class ConfigError(SatslabError):
    """Bad configuration, bad usage, or shape mismatch."""


class DataError(SatslabError):
    """Corrupt or inconsistent data on disk or in label maps."""


class NumericalError(SatslabError):
    """Numerical failure (NaN loss, diverged training)."""
