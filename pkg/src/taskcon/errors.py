"""Exception hierarchy shared by the library and the command-line harness."""


class TaskconError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(TaskconError, ValueError):
    exit_code = 1


class DataError(TaskconError, ValueError):
    exit_code = 2


class NumericError(TaskconError, FloatingPointError):
    """A tensor or loss term became non-finite."""

    exit_code = 3


class TrainingError(TaskconError, RuntimeError):
    """Training aborted. ``last_good`` holds the newest finite checkpoint, if any."""

    exit_code = 3

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
