"""Exception types raised by the package."""


class LowRankIgaError(Exception):
    """Base class for all package errors."""


class DomainError(LowRankIgaError, ValueError):
    """An argument lies outside the admissible domain (e.g. x not in [0, 1])."""


class ValidationError(LowRankIgaError, ValueError):
    """Malformed input data such as an invalid knot vector or geometry file."""


class SingularJacobianError(LowRankIgaError, ArithmeticError):
    """The geometry Jacobian is singular at a parameter point."""

    def __init__(self, point, message=None):
        self.point = tuple(float(v) for v in point)
        super().__init__(message or "singular geometry Jacobian at x=%s" % (self.point,))


class IllConditionedError(LowRankIgaError, ArithmeticError):
    """A collocation or projected system is too ill-conditioned to solve."""


class SizeCapError(LowRankIgaError, MemoryError):
    """Refusal to materialize an object above the configured size cap."""


class ConvergenceError(LowRankIgaError, RuntimeError):
    """An iterative method failed in a way that leaves no usable iterate."""
