"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so callers can distinguish bad
configuration from bad usage from corrupt data.
"""


class DeskRLError(Exception):
    exit_code = 1


class ConfigError(DeskRLError):
    """Invalid configuration value or malformed task/suite definition."""

    exit_code = 2


class UsageError(DeskRLError):
    """API called outside its contract (e.g. stepping a finished episode)."""

    exit_code = 3


class DataError(DeskRLError):
    """Corrupt or unreadable serialized artifact (suite, buffer, checkpoint)."""

    exit_code = 4


class NonFiniteGradientError(DeskRLError):
    """Optimizer received a NaN/inf gradient; the step was aborted."""

    exit_code = 5
