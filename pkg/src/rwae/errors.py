"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(IOError):
    """A dataset or checkpoint file is corrupt, truncated or of the wrong version."""


class ConfigurationError(RuntimeError):
    """A run cannot proceed under the given configuration."""
