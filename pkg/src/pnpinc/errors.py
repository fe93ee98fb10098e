"""Exception types shared across the package."""

__all__ = [
    "PnpIncError",
    "ShapeMismatchError",
    "NonConvergenceError",
    "ScheduleExhaustedError",
    "UnsupportedCombinationError",
    "ContainerFormatError",
]


class PnpIncError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(PnpIncError, ValueError):
    """Operand dimensions are inconsistent."""


class NonConvergenceError(PnpIncError, RuntimeError):
    """An inner iterative solver hit its iteration cap before its tolerance.

    Carries the last iterate and the residual/gap measure at the point of
    failure so callers can inspect or continue.
    """

    def __init__(self, message, last_iterate=None, gap=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gap = gap
        self.iterations = iterations


class ScheduleExhaustedError(PnpIncError, RuntimeError):
    """A fixed block schedule ran out of entries."""


class UnsupportedCombinationError(PnpIncError, ValueError):
    """Requested algorithm/loss combination is not defined."""


class ContainerFormatError(PnpIncError, ValueError):
    """A serialized model container is malformed."""
