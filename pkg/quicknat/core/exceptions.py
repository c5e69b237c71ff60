from enum import IntEnum


class ExitCode(IntEnum):
    OK = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3


class QuickNATError(Exception):
    """Base error; carries a human readable detail and the CLI exit code."""

    exit_code: ExitCode = ExitCode.DATA

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(QuickNATError):
    exit_code = ExitCode.USAGE


class DataError(QuickNATError):
    exit_code = ExitCode.DATA


class ShapeError(DataError, ValueError):
    pass


class NumericalError(QuickNATError):
    exit_code = ExitCode.NUMERICAL
