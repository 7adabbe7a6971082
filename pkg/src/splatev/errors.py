"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class SplatevError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SplatevError):
    """Invalid configuration value or malformed config file."""


class DataError(SplatevError):
    """Malformed or inconsistent input data (files, streams, poses)."""


class NumericError(SplatevError):
    """Numerical failure during optimization (non-finite loss, empty cloud)."""
