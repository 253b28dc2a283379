"""Exception types shared across the toolkit."""


class UltrasegError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(UltrasegError):
    """An input violates a documented contract (shape, range, value set)."""


class ConfigurationError(UltrasegError):
    """A run configuration is inconsistent or incomplete."""


class IngestionError(UltrasegError):
    """A manifest entry could not be loaded from disk."""


class TransferError(UltrasegError):
    """Checkpoint weights are incompatible with the target network."""


class TrainingDivergedError(UltrasegError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
