"""Exception hierarchy shared by all modules."""


class MmfnError(Exception):
    """Base class for errors raised by this package."""


class ModelStructureError(MmfnError, ValueError):
    """Model arrays have inconsistent shapes or non-numeric / negative entries."""


class ModelValidationError(MmfnError, ValueError):
    """A model invariant (irreducibility, substochastic routing, ...) fails."""

    def __init__(self, report):
        self.report = report
        failed = [c.name for c in report.checks if not c.passed]
        super().__init__("model validation failed: " + ", ".join(failed))


class ConvergenceError(MmfnError, RuntimeError):
    """An iterative procedure hit its iteration cap."""

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


class NumericalError(MmfnError, RuntimeError):
    """A numerical safeguard tripped (degenerate spectral gap, livelock, ...)."""


class PreconditionError(MmfnError, ValueError):
    """An operation was called outside its domain (unstable model, bad direction)."""


class DirectionOutsideCorn(PreconditionError):
    """The direction does not cross the upper frontier of the negative-eigenvalue set."""
