"""Exception hierarchy shared by all modules."""


class SCTError(Exception):
    """Base class for library errors."""


class ConfigurationError(SCTError, ValueError):
    """Inputs are inconsistent (grid mismatch, missing branch data, bad names)."""


class DomainError(SCTError, ValueError):
    """An argument lies outside the domain of an operation (e.g. nonzero mean)."""


class RegimeError(SCTError):
    """The coupling is too strong for the model to be well defined.

    ``bound`` carries the offending quantity, e.g. ``delta * max|S'|``.
    """

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class NumericalError(SCTError, ArithmeticError):
    """An iterative routine failed to converge.

    ``residual`` is the last residual seen, ``diagnostics`` is a free-form dict.
    """

    def __init__(self, message, residual=None, diagnostics=None):
        super().__init__(message)
        self.residual = residual
        self.diagnostics = diagnostics or {}


class NonContraction(NumericalError):
    """A fixed-point iteration stopped contracting."""

    def __init__(self, message, residual=None, diagnostics=None, trace=None):
        super().__init__(message, residual, diagnostics)
        self.trace = trace


class SpectralGapError(NumericalError):
    """The deflated resolvent system is singular or numerically so."""
