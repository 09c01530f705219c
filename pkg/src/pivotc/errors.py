"""Exception hierarchy shared by every pivotc module."""


class PivotError(Exception):
    """Base class for all codec errors."""


class InvalidStepError(PivotError, ValueError):
    pass


class CoordinateRangeError(PivotError, ValueError):
    pass


class ShapeError(PivotError, ValueError):
    pass


class PlyParseError(PivotError, ValueError):
    pass


class ContainerError(PivotError, ValueError):
    pass


class TruncatedStreamError(PivotError, EOFError):
    pass


class CorruptStreamError(PivotError, ValueError):
    pass


class EmptyInputError(PivotError, ValueError):
    pass


class ModelError(PivotError, ValueError):
    pass


class ModelMismatchError(ModelError):
    pass


class TrainingDivergedError(PivotError, FloatingPointError):
    pass


class MetricError(PivotError, ValueError):
    pass


class ConfigError(PivotError, ValueError):
    pass


class GenerationError(PivotError, ValueError):
    pass


class DecodeError(PivotError):
    """Raised by the decoder with the failing stage attached."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage} stage: {cause}")
        self.stage = stage
        self.cause = cause
