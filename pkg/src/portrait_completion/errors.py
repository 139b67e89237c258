"""Exception types shared across the package."""


class PortraitError(Exception):
    """Base class for all package errors."""


class ValidationError(PortraitError, ValueError):
    """Input data violates a documented invariant."""


class ShapeError(ValidationError):
    """Tensor or image shape does not satisfy a network's contract."""


class DatasetLoadError(PortraitError, OSError):
    pass


class GenerationError(PortraitError, ValueError):
    pass


class PreconditionError(ValidationError):
    pass


class FaceNotFoundError(PreconditionError):
    """The parsing map contains no face-class pixels."""


class CheckpointError(PortraitError):
    """Corrupt, truncated, version-mismatched or wrong-kind checkpoint."""


class ConvergenceError(PortraitError, ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual
