"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (shapes, sizes, unresolvable settings)."""


class DataError(ValueError):
    """Malformed or out-of-range data (unknown feature ids, missing labels)."""


class UsageError(RuntimeError):
    """API misuse, e.g. backpropagating through a stale tape."""


class NumericalError(FloatingPointError):
    """NaN or infinite values encountered during training."""
