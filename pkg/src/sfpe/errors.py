"""Exception types raised by the solver and its helpers."""


class SFPEError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SFPEError, ValueError):
    pass


class OutOfRangeError(InvalidArgumentError):
    """Raised when a value grid is read outside its time support."""


class IllConditionedSigmaError(SFPEError):
    """The diffusion matrix could not be solved against to the required residual."""

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class FailedSweepError(SFPEError):
    """A Picard sweep produced too many diverged paths or a non-finite estimate."""

    def __init__(self, message, node=None, diverged_fraction=None):
        super().__init__(message)
        self.node = node
        self.diverged_fraction = diverged_fraction


class DivergingIterationError(SFPEError):
    """The Picard iteration failed to contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
