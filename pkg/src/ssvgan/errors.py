"""Exception types shared across the package, with CLI exit codes."""


class SsvganError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ShapeError(SsvganError, ValueError):
    """An array argument has the wrong rank, size, or geometry."""

    exit_code = 2


class ParameterError(SsvganError, ValueError):
    """A transform or op parameter is outside its documented range."""

    exit_code = 2


class ConfigurationError(SsvganError, ValueError):
    """A config value or combination of values is invalid."""

    exit_code = 2


class DataError(SsvganError, RuntimeError):
    """A dataset file is missing, truncated, or corrupt."""

    exit_code = 3


class NumericError(SsvganError, RuntimeError):
    """A loss or weight became non-finite during training."""

    exit_code = 4
