"""Shared exception and warning types."""


class ValidationError(ValueError):
    """A problem description violates a structural constraint."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget.

    Carries the last achieved residual so callers can decide whether to
    fall back to a direct backend.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class HypothesisWarning(UserWarning):
    """A theoretical hypothesis of the control problem is violated.

    Runs proceed anyway; results outside the hypotheses carry no
    guarantee.
    """


class ParameterWarning(UserWarning):
    """A parameter is outside its nominal range but still usable."""
