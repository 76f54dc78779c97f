"""Exception and warning types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class DimensionError(ValueError):
    """Array shapes do not conform."""


class DegenerateDataError(ValueError):
    """The data carry no information for the requested estimate."""


class ConvergenceError(RuntimeError):
    """An iterative method did not converge.

    The last iterate (and an optional trace) are kept so callers can inspect
    or resume from them.
    """

    def __init__(self, message, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace if trace is not None else []


class InitializationError(RuntimeError):
    """The sampler could not start from a state with finite posterior."""


class DiagnosticsError(ValueError):
    """Too few draws to compute the requested summary."""


class DiagnosticsWarning(UserWarning):
    """Chain diagnostics flagged a problem (e.g. very low acceptance)."""


class InferenceUnavailableWarning(UserWarning):
    """Standard errors could not be computed (singular or indefinite Hessian)."""
