"""Exception types raised across the package."""


class CnnRomError(Exception):
    """Base class for package errors."""


class ShapeError(CnnRomError, ValueError):
    """Array or tensor shapes do not agree."""


class ConvergenceError(CnnRomError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class SingularSystemError(CnnRomError, ArithmeticError):
    """A (reduced) linear system is singular or too ill-conditioned."""


class FormatError(CnnRomError, ValueError):
    """A file does not follow the expected on-disk layout."""


class TrainingError(CnnRomError):
    """Training aborted (divergence, too many skipped samples, ...)."""
