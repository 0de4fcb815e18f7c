"""Exception types shared across the package."""


class CrossRankError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossRankError, ValueError):
    pass


class ValidationError(CrossRankError, ValueError):
    pass


class ConfigError(CrossRankError, ValueError):
    pass


class DegenerateEmbeddingError(CrossRankError, ValueError):
    """Raised when a similarity is requested for an all-zero embedding row."""


class NumericError(CrossRankError, ArithmeticError):
    """A loss, gradient or parameter became non-finite.

    ``component`` names the offending piece (e.g. ``"rank"`` or ``"gene/W2"``).
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class GenerationError(CrossRankError, RuntimeError):
    pass


class CheckpointError(CrossRankError, ValueError):
    """Checkpoint file could not be parsed."""


class UnsupportedVersionError(CheckpointError):
    def __init__(self, found, supported):
        super().__init__(
            f"checkpoint format_version {found} is not supported "
            f"(this build reads version {supported})"
        )
        self.found = found
        self.supported = supported
