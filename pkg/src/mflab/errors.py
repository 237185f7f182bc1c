"""Exception hierarchy shared by every mflab module."""


class MflabError(Exception):
    """Base class for all mflab errors."""


class DimensionMismatch(MflabError, ValueError):
    pass


class ShapeMismatch(MflabError, ValueError):
    pass


class GridMismatch(MflabError, ValueError):
    pass


class TooFewLayers(MflabError, ValueError):
    pass


class TooLarge(MflabError, ValueError):
    pass


class SolverCapExceeded(MflabError, RuntimeError):
    pass


class InvalidMeasure(MflabError, ValueError):
    pass


class NonFinite(MflabError, FloatingPointError):
    pass


class NonFiniteState(NonFinite):
    """Raised by the forward integrator; ``node`` is the first offending node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class TraceMismatch(MflabError, ValueError):
    pass


class CertificateViolated(MflabError, AssertionError):
    pass


class StepFailure(MflabError, RuntimeError):
    pass


class FitFailure(MflabError, RuntimeError):
    pass


class InsufficientData(MflabError, ValueError):
    pass


class ConfigError(MflabError, ValueError):
    pass
