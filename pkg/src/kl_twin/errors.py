"""Exception hierarchy shared by the library and the CLI exit codes."""

from __future__ import annotations


class KlTwinError(Exception):
    """Base class for every failure raised by kl_twin."""

    exit_code: int = 1


class InvalidArgumentError(KlTwinError, ValueError):
    """Bad input: sizes, signs, lengths or grid mismatches."""

    exit_code = 2


class ConfigError(KlTwinError):
    """Experiment configuration could not be read or validated."""

    exit_code = 2


class DecompositionError(KlTwinError):
    """A factorization, eigensolve or least-squares problem is singular or under-determined."""

    exit_code = 3


class TrainingError(KlTwinError):
    """MLP training diverged."""

    exit_code = 3

    def __init__(self, message: str, *, epoch: int, loss: float) -> None:
        super().__init__(f"{message} (epoch {epoch}, loss {loss!r})")
        self.epoch = epoch
        self.loss = loss


class FormatError(KlTwinError):
    """Artifact file is truncated, corrupt or from another format version."""

    exit_code = 4

    def __init__(self, message: str, *, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class StageError(KlTwinError):
    """Wraps a failure with the pipeline stage and condition it happened in."""

    def __init__(self, stage: str, condition: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {condition}: {cause}")
        self.stage = stage
        self.condition = condition
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
