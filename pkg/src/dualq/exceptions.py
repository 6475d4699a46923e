"""Exception hierarchy shared by every module."""


class DualQError(Exception):
    """Base class for all errors raised by this package."""


class InvalidEnvError(DualQError, ValueError):
    pass


class InvalidPolicyError(DualQError, ValueError):
    pass


class ConfigError(DualQError, ValueError):
    pass


class DomainError(DualQError, ValueError):
    """An action, state or category outside the domain of an object."""


class NumericError(DualQError, ArithmeticError):
    pass


class DatasetFormatError(DualQError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FingerprintError(DualQError, ValueError):
    pass


class StageError(DualQError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
