"""Exception types shared across the pipeline."""


class MVVCError(Exception):
    """Base class for pipeline errors."""


class ShapeError(MVVCError, ValueError):
    """Tensor shapes do not chain; message names the offending dimension."""


class NumericalError(MVVCError, ArithmeticError):
    """Non-finite values, unconverged solvers or failed invariants."""


class FormatError(MVVCError, ValueError):
    """A file on disk does not match its declared binary/text format."""


class ConfigError(MVVCError, ValueError):
    pass


class MissingArtifactError(MVVCError, FileNotFoundError):
    """An upstream stage output is missing; ``command`` names the stage to run."""

    def __init__(self, message: str, command: str):
        super().__init__(message)
        self.command = command


class InsufficientDataError(MVVCError, ValueError):
    pass
