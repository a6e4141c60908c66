"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or extents are incompatible with an operation's contract."""


class PreconditionError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, unsupported, or incompatible."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
