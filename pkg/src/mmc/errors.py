"""Exception types raised by the library."""


class MmcError(Exception):
    """Base class for all library errors."""


class ValidationError(MmcError, ValueError):
    """Input failed a precondition check."""


class ConvergenceError(MmcError):
    """An iterative routine hit its iteration cap.

    ``iterations`` is the number of iterations performed and ``residuals``
    holds whatever diagnostics the routine had at the point it gave up.
    """

    def __init__(self, message, iterations=None, residuals=None):
        super().__init__(message)
        self.iterations = iterations
        self.residuals = residuals or {}


class DivergenceError(MmcError):
    """Iterates blew up (typically the step size is too large)."""

    def __init__(self, message, iteration=None, value=None):
        super().__init__(message)
        self.iteration = iteration
        self.value = value


class NumericalError(MmcError):
    """A linear system that should be well posed turned out singular."""
