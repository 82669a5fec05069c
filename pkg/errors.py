# errors.py
"""Exception types shared by every pipeline stage, each carrying its CLI exit code."""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5


class FurpeError(Exception):
    exit_code = EXIT_NUMERICAL


# --- usage / argument errors ---
class InvalidArgumentError(FurpeError, ValueError):
    exit_code = EXIT_USAGE


# --- validation errors ---
class ConfigurationError(FurpeError):
    exit_code = EXIT_VALIDATION


class SchemaValidationError(FurpeError):
    exit_code = EXIT_VALIDATION

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


class SchemaVersionError(SchemaValidationError):
    pass


# --- numerical errors ---
class ProjectionDomainError(FurpeError):
    pass


class AlignmentError(FurpeError):
    pass


class DegenerateInputError(FurpeError):
    pass


class GateUndefinedError(FurpeError):
    pass


class FusionError(FurpeError):
    pass


class NumericalError(FurpeError):
    pass


# --- file errors ---
class DataIOError(FurpeError):
    exit_code = EXIT_IO

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path
