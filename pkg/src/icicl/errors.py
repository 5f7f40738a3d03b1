"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateMaskError(ValueError):
    """A masked attention row has no unblocked key."""


class EmptyKeysError(ValueError):
    """Cross-attention was called with an empty key set."""


class NumericalError(FloatingPointError):
    """A computation produced non-finite values or failed to factorise."""


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""


class TaskError(ValueError):
    """A task violates the structural constraints of the model consuming it."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
