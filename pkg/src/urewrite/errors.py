class RewriterError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigError(RewriterError):
    exit_code = 2


class DataError(RewriterError):
    exit_code = 3


class NumericError(RewriterError):
    """NaN/Inf encountered in a forward or backward pass."""

    exit_code = 4


class ShapeError(RewriterError, ValueError):
    pass


class ContractError(RewriterError):
    """An operation was called outside its preconditions."""
