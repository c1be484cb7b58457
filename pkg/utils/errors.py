# utils/errors.py
"""Exception hierarchy shared by every module.

Library code raises; the command handlers in ``handlers/`` catch
``CalibrationToolkitError`` and turn it into the process exit code.
"""


class CalibrationToolkitError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this class."""

    exit_code = 1


class ConfigError(CalibrationToolkitError):
    exit_code = 2


class DataError(CalibrationToolkitError):
    exit_code = 3


class NumericError(CalibrationToolkitError):
    exit_code = 4


# --- configuration ---

class MissingArtifactError(ConfigError):
    """A path the configuration points at does not exist yet."""

    def __init__(self, path, stage_hint=None):
        self.path = str(path)
        message = f"Required artifact not found: '{self.path}'"
        if stage_hint:
            message += f" (run '{stage_hint}' first)"
        super().__init__(message)


class MissingLanguageModelError(ConfigError):
    pass


# --- data ---

class DimensionMismatchError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class MalformedSpanError(DataError):
    pass


class MissingGoldError(DataError):
    pass


class EmptyDataError(DataError):
    pass


class DegenerateDataError(DataError):
    """Forecaster training data holds a single class."""


class SchemaMismatchError(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class DumpParseError(DataError):
    def __init__(self, path, line_number, reason):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}:{line_number}: malformed dump line ({reason})")


# --- numerics ---

class NonFiniteScoreError(NumericError):
    pass
