"""Exception hierarchy shared by every stage of the pipeline.

Each family carries the CLI exit code it maps to.
"""


class AllfuseError(Exception):
    exit_code = 1


class ConfigError(AllfuseError):
    exit_code = 2


class DataError(AllfuseError):
    exit_code = 3


class DecodeError(DataError):
    pass


class MissingArtifactError(DataError):
    pass


class NumericalError(AllfuseError):
    exit_code = 4


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class EnsembleError(NumericalError):
    pass


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass
