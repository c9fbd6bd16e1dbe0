"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class FailedPreconditionError(RuntimeError):
    """The object is not in a state that allows the requested operation."""


class SolverError(RuntimeError):
    """A numerical solve did not reach its tolerance.

    Attributes
    ----------
    residual : float
        Last residual (gradient norm) seen by the failing solver.
    iteration : int or None
        Outer iteration index at which the failure happened, if known.
    """

    def __init__(self, message, residual=float("nan"), iteration=None):
        super().__init__(message)
        self.residual = residual
        self.iteration = iteration


class InvariantViolationError(RuntimeError):
    """An internal invariant (e.g. energy descent) was broken."""
