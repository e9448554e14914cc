"""Exception types raised across the package."""


class CGLSError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CGLSError, ValueError):
    pass


class InputError(CGLSError, ValueError):
    pass


class NumericError(CGLSError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TruncationError(InputError):
    pass


class GrowthError(CGLSError, ValueError):
    pass


class MaskError(CGLSError, ValueError):
    pass


class SamplingError(CGLSError, ValueError):
    pass


class DomainError(CGLSError, ValueError):
    pass


class AllocationError(CGLSError, ValueError):
    pass


class ScheduleError(CGLSError, ValueError):
    pass


class StateError(CGLSError, ValueError):
    pass


class TrainingError(CGLSError, RuntimeError):
    def __init__(self, message, stage=None, phase=None, step=None, checkpoint=None):
        super().__init__(message)
        self.stage = stage
        self.phase = phase
        self.step = step
        self.checkpoint = checkpoint


class EvalError(CGLSError, ValueError):
    pass


class StratificationError(CGLSError, ValueError):
    pass


class ClassifierTrainingError(StratificationError):
    pass


class CheckpointError(CGLSError, IOError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ConfigValidationError(ConfigError):
    """Carries every violation found, each prefixed with its path in the config."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))
