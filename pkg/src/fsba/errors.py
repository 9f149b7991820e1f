"""Exception types shared across the toolkit."""


class FSBAError(Exception):
    """Base class for toolkit errors."""


class IngestionError(FSBAError):
    """A dataset directory is missing required files."""


class FormatError(FSBAError, ValueError):
    """A dataset file is malformed."""


class ConfigurationError(FSBAError, ValueError):
    """A configuration value is invalid or inconsistent."""


class LabelingError(FSBAError, ValueError):
    """Candidate labels could not be produced for the requested geometry."""


class TrainingError(FSBAError, RuntimeError):
    """Training diverged or otherwise failed."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class EvaluationError(FSBAError, ValueError):
    """Metrics cannot be computed on the given inputs."""
