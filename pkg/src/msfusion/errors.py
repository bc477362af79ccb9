"""Exception hierarchy shared across the pipeline."""


class MsfusionError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ValidationError(MsfusionError, ValueError):
    """Input data violates a declared invariant."""


class VolumeIOError(MsfusionError, IOError):
    """Volume file cannot be read or written."""


class RegistrationError(MsfusionError):
    """Registration optimizer diverged; carries the last valid transform."""

    def __init__(self, message, last_transform=None):
        super().__init__(message)
        self.last_transform = last_transform


class TrainingDivergedError(MsfusionError):
    """Training hit a non-finite loss; carries the last checkpoint path."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PreprocessError(MsfusionError):
    """Failure inside the preprocessing pipeline, tagged with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"preprocess stage '{stage}': {cause}")
        self.stage = stage


class ConfigError(MsfusionError):
    """Bad pipeline configuration (CLI exit code 2)."""
