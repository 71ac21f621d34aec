"""Exception types shared across the toolkit."""


class AuditError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AuditError, ValueError):
    pass


class InputError(AuditError, ValueError):
    pass


class ConfigError(AuditError, ValueError):
    pass


class TrainingError(AuditError, RuntimeError):
    """Raised when an optimisation run diverges (non-finite loss)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SelectionError(AuditError, ValueError):
    """Too few features survive filtering to build an expert set."""

    def __init__(self, message: str, class_index: int):
        super().__init__(message)
        self.class_index = class_index


class StageError(AuditError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
