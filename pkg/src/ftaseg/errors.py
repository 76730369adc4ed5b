"""Error taxonomy shared by all modules.

The split mirrors the CLI exit codes: configuration problems (exit 2),
bad or inconsistent data (exit 3), numeric failures (exit 4).
"""


class FtasegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FtasegError):
    """Invalid configuration value or combination."""


class DataError(FtasegError):
    """Malformed file, shape mismatch, or out-of-contract input data."""


class NumericError(FtasegError):
    """Non-finite values or numerically impossible operation."""


class UndefinedMetricError(DataError):
    """Metric requested on inputs where it has no defined value."""
