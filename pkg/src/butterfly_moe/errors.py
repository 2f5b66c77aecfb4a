"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument value."""


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class NumericError(RuntimeError):
    """A computation produced non-finite values (e.g. a diverging loss)."""
