"""Semantic exception hierarchy.

The CLI maps these onto stable exit codes: validation failures exit 2,
numerical failures (convergence, boundary, singularity) exit 3.
"""


class FusionError(Exception):
    """Base class for all package errors."""


class ValidationError(FusionError):
    """Malformed input: bad dimensions, out-of-range values, broken invariants.

    ``field`` names the offending field or file location when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class BoundaryError(FusionError):
    """A weight denominator 1 + g_i'lam left the positive region.

    ``row`` is the (0-based) index of the first offending observation.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ConvergenceError(FusionError):
    """An iterative solver exhausted its iteration budget.

    ``last`` carries the final iterate, ``residual`` the final gradient
    or residual norm, ``trace`` an optional per-iteration log.
    """

    def __init__(self, message, last=None, residual=None, trace=None):
        super().__init__(message)
        self.last = last
        self.residual = residual
        self.trace = trace


class SingularMatrixError(FusionError):
    """A matrix required to be invertible is singular or too ill-conditioned.

    ``detail`` holds a rank report or eigenvalue list.
    """

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail
