"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class GiftError(Exception):
    exit_code = 1


class ConfigError(GiftError):
    exit_code = 2


class DataError(GiftError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class ParameterError(ConfigError, ValueError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(GiftError, FloatingPointError):
    exit_code = 4

    def __init__(self, message: str, last_good_epoch: int | None = None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class ArtifactIOError(GiftError, OSError):
    exit_code = 5
