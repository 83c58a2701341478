"""Exception types raised across the package."""


class LayerCompError(Exception):
    """Base class for all package errors."""


class DimensionError(LayerCompError, ValueError):
    """Operand shapes are incompatible."""


class DivisibilityError(LayerCompError, ValueError):
    """A grid extent or channel count is not divisible by the merge ratio."""


class ConfigurationError(LayerCompError, ValueError):
    """Parameters or settings do not fit together."""


class ContractError(LayerCompError, RuntimeError):
    """A caller broke an API precondition (e.g. backward on a non-scalar)."""


class EvaluationError(LayerCompError, RuntimeError):
    """A function produced a non-finite value where a finite one was required."""
