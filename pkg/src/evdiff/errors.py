"""Exception taxonomy shared by all modules.

Every error carries a machine-readable ``code`` so the CLI can emit
structured failures and map them to exit codes.
"""


class EvdiffError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_code = 1

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ParameterError(EvdiffError):
    code = "parameter_error"
    exit_code = 2


class RangeError(EvdiffError):
    code = "range_error"
    exit_code = 3


class DataError(EvdiffError):
    code = "data_error"
    exit_code = 4


class StateError(EvdiffError):
    code = "state_error"
    exit_code = 5


class NumericalError(EvdiffError):
    code = "numerical_error"
    exit_code = 6


class FormatError(EvdiffError):
    """Malformed file content; ``offset`` is the byte offset of the defect."""

    code = "format_error"
    exit_code = 7

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self), "offset": self.offset}


class ValidationError(EvdiffError):
    """Configuration violates a precondition; ``field`` names the culprit."""

    code = "validation_error"
    exit_code = 8

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self), "field": self.field}


class StalenessError(EvdiffError):
    code = "staleness_error"
    exit_code = 9


class PoolTimeoutError(EvdiffError):
    code = "pool_timeout"
    exit_code = 10
