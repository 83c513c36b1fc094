"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not fit the operation."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class NumericalError(ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class DataError(ValueError):
    """Malformed or inconsistent data on disk."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
