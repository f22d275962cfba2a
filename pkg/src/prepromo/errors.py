"""Exception types, mapped to distinct CLI exit codes by the runner."""


class PrepromoError(Exception):
    """Base class for all package errors."""


class ConfigError(PrepromoError):
    """Invalid configuration: unknown key, bad value, shape mismatch."""


class DataError(PrepromoError):
    """Unusable input data: malformed files, empty windows, missing classes."""


class TrainingError(PrepromoError):
    """A training stage could not run or produced unusable output."""


class UsageError(PrepromoError):
    """A library call violated its contract."""
