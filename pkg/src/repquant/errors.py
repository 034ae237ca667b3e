"""Exception hierarchy shared by every module."""


class RepQuantError(Exception):
    """Base class for all package errors."""


class ConfigError(RepQuantError, ValueError):
    """Invalid shapes, toggles or configuration values."""


class NumericError(RepQuantError, FloatingPointError):
    """A value became NaN or Inf."""


class DegenerateBatchError(NumericError):
    """Batch statistics were requested over a single element per channel."""


class FusionIntegrityError(RepQuantError, RuntimeError):
    """The fused kernel does not reproduce the multi-branch block."""


class TrainingDivergedError(NumericError):
    """Loss or activations turned non-finite during training."""


class CheckpointError(RepQuantError, IOError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ModeMismatchError(CheckpointError):
    """A deploy checkpoint was loaded where a train-mode model was expected (or vice versa)."""


class DatasetFormatError(RepQuantError, ValueError):
    pass
