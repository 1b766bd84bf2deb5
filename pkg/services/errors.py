"""
Errors Module - Structured exceptions raised by the numerical services
"""

from typing import Optional


class GoatError(Exception):
    """Base class for every error raised by the services package."""


class DimensionMismatchError(GoatError, ValueError):
    """Two operands that must share a dimension do not."""

    def __init__(self, left: int, right: int, what: str = "matrix"):
        self.left = left
        self.right = right
        super().__init__(f"{what} dimension mismatch: {left} vs {right}")


class InvalidMatrixError(GoatError, ValueError):
    """A matrix is not square, is empty, or holds non-finite entries."""


class TimeRangeError(GoatError, ValueError):
    """A control was evaluated outside [0, T]."""

    def __init__(self, t: float, duration: float):
        self.t = t
        self.duration = duration
        super().__init__(f"time {t!r} lies outside [0, {duration!r}]")


class BoundaryDerivativeError(GoatError, ValueError):
    """A time derivative was requested exactly on a piece boundary."""

    def __init__(self, t: float, order: int):
        self.t = t
        self.order = order
        super().__init__(f"time derivative of order {order} is undefined at piece boundary t={t!r}")


class StepTooLargeError(GoatError, ArithmeticError):
    """The last Taylor terms exceed the step tolerance at the maximal order."""

    def __init__(self, residual: float, tolerance: float):
        self.residual = residual
        self.tolerance = tolerance
        super().__init__(f"Taylor residual {residual:.3e} exceeds tolerance {tolerance:.3e}")


class NonConvergenceError(GoatError, ArithmeticError):
    """A propagator could not advance because its step size underflowed."""

    def __init__(self, t: float, residual: Optional[float], detail: str = ""):
        self.t = t
        self.residual = residual
        message = f"propagation stalled at t={t!r}"
        if residual is not None:
            message += f" (last residual {residual:.3e})"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class SingularOverlapError(GoatError, ArithmeticError):
    """The gate overlap is too close to zero for the modulus to be differentiated."""

    def __init__(self, overlap: complex):
        self.overlap = overlap
        super().__init__(f"overlap {abs(overlap):.3e} is too small to differentiate |Tr(U_goal^dag U)|")


class ConfigError(GoatError, ValueError):
    """A configuration document failed validation at a given field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)
