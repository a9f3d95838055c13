"""
Error Types
Exception hierarchy shared by every service; the CLI maps these to exit codes
"""


class EchlError(Exception):
    """Base class for all library errors"""


class ConfigError(EchlError):
    """Invalid configuration or flag combination (usage error)"""


class DatasetParseError(EchlError):
    """Malformed row in a dataset file"""

    def __init__(self, path, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class DatasetValidationError(EchlError):
    """Dataset parsed but violates a structural invariant"""


class ShapeError(EchlError):
    """Operand shapes do not agree"""


class NumericalError(EchlError):
    """An operation produced NaN or Inf"""


class TapeConsumedError(EchlError):
    """backward() called twice on the same tape"""


class OptimizerStateError(EchlError):
    """Optimizer stepped without populated gradients"""


class TrainingDivergedError(EchlError):
    """Training loss became non-finite"""


class LeakageError(EchlError):
    """Non-training rows reached a train-only statistic"""


class ArtifactFormatError(EchlError):
    """Run artifact is missing, truncated or has the wrong layout"""


class SplitMissingError(EchlError):
    """Requested split is not available"""


class LabelError(EchlError):
    """Label array is not binary"""
