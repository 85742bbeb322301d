"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not line up (channel counts, kernel sizes, ...)."""


class ConfigError(ValueError):
    """A structural option is invalid (groups not dividing C, bad key, ...)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or hit uninitialized state."""
