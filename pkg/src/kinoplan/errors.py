"""Shared exception types, mapped to CLI exit codes in cli.py."""


class KinoplanError(Exception):
    """Base class for package errors."""


class DimensionError(KinoplanError):
    """Tensor/vector shapes are inconsistent with the declared sizes."""


class ConfigError(KinoplanError):
    """Invalid or missing configuration field. CLI exit code 2."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class TrainingError(KinoplanError):
    """Non-finite loss/gradient or another unrecoverable training fault."""


class DataError(KinoplanError):
    """Replay or batch record is missing a required field or malformed."""


class ArtifactMismatchError(KinoplanError):
    """Checkpoint/config/schema incompatible with this build. CLI exit code 3."""
