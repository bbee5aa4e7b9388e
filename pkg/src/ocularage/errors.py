"""Exception hierarchy shared by every stage of the pipeline.

Each family carries the process exit code the CLI reports for it.
"""


class OcularAgeError(Exception):
    exit_code = 1


class ConfigError(OcularAgeError):
    exit_code = 2


class DataError(OcularAgeError):
    exit_code = 3


class TrainingError(OcularAgeError):
    exit_code = 4


class EvalError(OcularAgeError):
    exit_code = 5


# data
class OutOfStudyRange(DataError, ValueError):
    pass


class InsufficientSubjects(DataError):
    pass


class ManifestParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class IoError(DataError):
    pass


class SegmentationFailure(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ZeroStd(DataError, ValueError):
    pass


# network / training
class ShapeMismatch(TrainingError, ValueError):
    pass


class StaleCache(TrainingError):
    pass


class EmptySplit(TrainingError):
    pass


class DivergedLoss(TrainingError):
    pass


class EmptyBatch(TrainingError, ValueError):
    pass


class MissingClass(TrainingError, ValueError):
    pass


# checkpoints and evaluation
class CorruptCheckpoint(EvalError):
    pass


class VersionMismatch(EvalError):
    pass


class SubjectLeakage(EvalError):
    pass


class EmptyInput(EvalError, ValueError):
    pass


class NoConvLayer(EvalError):
    pass
