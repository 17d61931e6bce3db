"""Exception types raised across the pipeline."""


class CBCTError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CBCTError, ValueError):
    pass


class PreconditionError(CBCTError, ValueError):
    pass


class InsufficientCoverageError(CBCTError, ValueError):
    pass


class TrainingFailureError(CBCTError, RuntimeError):
    pass


class NoSinusFoundError(CBCTError, RuntimeError):
    pass


class UndefinedAUCError(CBCTError, ValueError):
    pass


class StageError(CBCTError, RuntimeError):
    """Wraps a failure inside one named stage of an experiment run."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
