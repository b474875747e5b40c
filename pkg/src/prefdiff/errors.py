"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes."""


class InputError(ValueError):
    """A value outside the domain an operation accepts."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite."""


class SamplingError(RuntimeError):
    """A non-finite intermediate appeared while sampling."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class MissingArtifact(FileNotFoundError):
    """A prerequisite file (dataset, checkpoint) does not exist."""
