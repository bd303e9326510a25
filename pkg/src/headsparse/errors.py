"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """A caller violated an operation's input contract."""


class NumericError(ValueError):
    """An input contained non-finite values where finite ones are required."""


class InternalError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""


class ConfigError(ArgumentError):
    """A run configuration failed validation."""
