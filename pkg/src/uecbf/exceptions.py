"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad construction input: dimension mismatch, nonpositive gain, unknown key."""


class IntegrationFault(RuntimeError):
    """Non-finite derivative encountered during integration.

    Carries the offending time and whatever portion of the trace was
    accumulated before the fault, for diagnostics.
    """

    def __init__(self, message, t=None, partial_trace=None):
        super().__init__(message)
        self.t = t
        self.partial_trace = partial_trace


class SolverFault(RuntimeError):
    """Numeric breakdown inside the QP solver (not infeasibility)."""


class MatchingError(RuntimeError):
    """The input matrix lost column rank; the matching matrix is undefined."""


class ScenarioFault(RuntimeError):
    """A scenario left its validity region (e.g. singular input map)."""
