"""Exception hierarchy. Each family maps to one CLI exit code."""


class ZSMSTMError(Exception):
    exit_code = 1


class ConfigError(ZSMSTMError):
    exit_code = 2


class DataError(ZSMSTMError):
    exit_code = 3


class MissingFile(DataError):
    pass


class MalformedManifest(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MalformedInterval(DataError):
    pass


class AlignmentGap(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class OverlappingSplits(DataError):
    pass


class UnknownSpeaker(DataError):
    pass


class ScriptMismatch(DataError):
    pass


class TooShort(DataError):
    pass


class BadIndex(DataError):
    pass


class BadMapping(DataError):
    pass


class EmptyInput(DataError):
    pass


class NonFiniteLoss(ZSMSTMError):
    """Training diverged."""

    exit_code = 4
