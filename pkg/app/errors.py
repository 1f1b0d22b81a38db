"""Exception hierarchy shared by services, nets and the CLI."""

from pathlib import Path
from typing import Optional, Union


class ForensicsError(Exception):
    """Base class for every error the CLI reports with a clean message."""


class ConfigurationError(ForensicsError):
    """Invalid dimensions, flag combinations, levels or config-file keys."""


class ShapeError(ForensicsError):
    """Tensor shape or channel count does not match what a component expects."""


class IngestionError(ForensicsError):
    """A dataset file is missing, corrupt or listed in more than one split."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = str(path) if path is not None else None
        if self.path and self.path not in message:
            message = f"{message}: {self.path}"
        super().__init__(message)


class PretrainingDataError(ForensicsError):
    """The realness prior was offered a forged record."""


class CheckpointError(ForensicsError):
    """Checkpoint missing, of the wrong kind or version, or a frozen group changed."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = str(path) if path is not None else None
        if self.path and self.path not in message:
            message = f"{message}: {self.path}"
        super().__init__(message)


class TrainingDivergedError(ForensicsError):
    """Loss became non-finite; the offending batch was dumped for inspection."""

    def __init__(self, batch_id: int, dump_path: Optional[Union[str, Path]] = None):
        self.batch_id = batch_id
        self.dump_path = str(dump_path) if dump_path is not None else None
        message = f"non-finite loss at batch {batch_id}"
        if self.dump_path:
            message += f" (batch dumped to {self.dump_path})"
        super().__init__(message)
