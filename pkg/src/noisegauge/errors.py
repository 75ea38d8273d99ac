"""Exceptions shared across pipeline and CLI layers."""


class ConfigError(ValueError):
    """Configuration failed to parse or validate (CLI exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """A referenced checkpoint/dataset/curve does not exist (CLI exit code 3)."""


class NumericalAbort(RuntimeError):
    """A non-finite value stopped training (CLI exit code 4)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
