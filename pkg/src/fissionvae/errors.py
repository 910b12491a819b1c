"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class FissionError(Exception):
    exit_code = 1


class ConfigError(FissionError):
    """Invalid configuration, shapes or hyperparameters."""


class UsageError(FissionError):
    """An API was called in a way its contract does not allow."""


class UnsupportedPathwayError(UsageError):
    pass


class ProtocolError(FissionError):
    """Federated aggregation received incompatible or foreign parameters."""


class DataError(FissionError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FissionError):
    exit_code = 3
