"""Exception hierarchy shared across the package."""


class MidVCLError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MidVCLError, ValueError):
    pass


class SolverError(MidVCLError, RuntimeError):
    """Raised when an iterative solver fails to reach its tolerance."""

    def __init__(self, message, residual_norm):
        super().__init__(f"{message} (residual norm {residual_norm:.3e})")
        self.residual_norm = residual_norm


class DatasetError(MidVCLError):
    pass


class MissingMaskError(DatasetError, FileNotFoundError):
    pass


class TrainingError(MidVCLError, RuntimeError):
    pass


class CheckpointError(MidVCLError):
    pass
