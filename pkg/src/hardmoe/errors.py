"""Exception hierarchy shared by every stage of the pipeline."""


class HardMoeError(Exception):
    """Base class for all errors raised by hardmoe."""


class DatasetValidationError(HardMoeError):
    """Dataset content violates an invariant (bad tag id, empty tag set, ...)."""


class FormatError(DatasetValidationError):
    """A binary artifact does not match its declared layout.

    Subclasses :class:`DatasetValidationError` because a malformed dataset
    file is also an invalid dataset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(HardMoeError):
    """Invalid configuration or argument value."""


class ShapeError(HardMoeError, ValueError):
    """Array dimensions do not agree."""


class SamplerError(HardMoeError):
    """Per-class sampling is impossible (no tag has support)."""


class TrainingError(HardMoeError):
    """Optimization diverged or a worker failed."""

    def __init__(self, message, expert_id=None):
        if expert_id is not None:
            message = f"expert {expert_id}: {message}"
        super().__init__(message)
        self.expert_id = expert_id


class UnsupportedModeError(HardMoeError):
    """Operation not defined for the bundle's decoder mode."""


class DependencyError(HardMoeError):
    """A pipeline stage is missing an upstream artifact."""
