"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class FormatError(ValueError):
    """A serialized file or checkpoint does not match the expected layout."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""
