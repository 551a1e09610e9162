"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class TapeError(RuntimeError):
    """The autodiff tape was used inconsistently (unknown or foreign node)."""


class ConfigError(ValueError):
    """A run configuration is malformed or contains unknown keys."""


class FormatError(ValueError):
    """An on-disk file does not conform to its declared format."""


class AllVoidImage(ContractError):
    """A ground-truth map contains no labelled pixels; the image carries no signal."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
