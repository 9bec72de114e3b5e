"""Exception hierarchy shared by every module."""


class EsnasError(Exception):
    """Base class for all package errors."""


class ParseError(EsnasError, ValueError):
    pass


class SchemaViolation(EsnasError, ValueError):
    pass


class SpaceMismatch(EsnasError, ValueError):
    pass


class GenomeSpaceMismatch(SpaceMismatch):
    pass


class RangeError(EsnasError, ValueError):
    pass


class DimensionMismatch(EsnasError, ValueError):
    pass


class WeightLengthMismatch(DimensionMismatch):
    pass


class MutationImpossible(EsnasError):
    pass


class TooLarge(EsnasError):
    pass


class UnknownId(EsnasError, KeyError):
    pass


class EmptyBatch(EsnasError, ValueError):
    pass


class DegenerateBatch(EsnasError):
    pass


class NonFiniteObjective(EsnasError, ValueError):
    pass


class NonFiniteUpdate(EsnasError, FloatingPointError):
    pass


class NonFiniteActivation(EsnasError, FloatingPointError):
    """Raised when a forward pass produces inf/nan.

    ``step`` is filled in by the rollout loop so the failing timestep is
    reported back to the aggregator.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        base = super().__str__()
        return base if self.step is None else f"{base} (step {self.step})"


class BadSupport(EsnasError, ValueError):
    pass


class ConfigError(EsnasError, ValueError):
    pass
