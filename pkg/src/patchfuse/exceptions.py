"""Exception types shared across the package."""


class EmptyInputError(ValueError):
    """An image or collection that must be non-empty was empty."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NotRecordingError(RuntimeError):
    """A backward pass was requested but gradient recording was not enabled."""


class UninitializedStatsError(RuntimeError):
    """Batch-norm inference requested before any running statistics were recorded."""


class ConfigError(ValueError):
    """A run-config file failed to parse or contained unknown keys."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeneratorSpecError(ValueError):
    """A synthetic-data generator spec is internally inconsistent."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs a file an earlier stage has not produced yet."""

    def __init__(self, path, hint=None):
        message = f"missing artifact: {path}"
        if hint:
            message = f"{message} ({hint})"
        super().__init__(message)
        self.path = path


class StageError(RuntimeError):
    """A cross-validation stage failed; carries the fold and stage identifier."""

    def __init__(self, fold, stage, cause):
        super().__init__(f"fold {fold}: stage '{stage}' failed: {cause}")
        self.fold = fold
        self.stage = stage
