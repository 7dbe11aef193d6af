"""Exceptions shared across the pipeline."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class PrerequisiteError(RuntimeError):
    """A pipeline stage was invoked before the stage it depends on."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
