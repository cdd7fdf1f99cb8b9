"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class GlycoError(Exception):
    """Base class for all toolkit errors."""


class ParseError(GlycoError):
    """Input bytes could not be decoded into events.

    ``offset`` is the byte offset of the failure when known.
    """

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RecordError(ParseError):
    """A single record inside a stream was unreadable."""

    def __init__(self, kind: str, ordinal: int, message: str) -> None:
        super().__init__(f"{kind} record #{ordinal}: {message}")
        self.kind = kind
        self.ordinal = ordinal


class StructuralError(GlycoError):
    """Inputs are well-formed individually but inconsistent as a whole."""


class NumericalError(GlycoError):
    """Arithmetic produced a non-finite or ill-defined result."""

    def __init__(self, message: str, step: int | None = None) -> None:
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step


class DomainError(NumericalError):
    """Argument outside the mathematical domain of an operation."""


class TrainingDivergence(NumericalError):
    """Loss became non-finite during optimisation."""

    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        GlycoError.__init__(
            self, f"non-finite training loss {loss!r} at epoch {epoch}, batch {batch}"
        )
        self.step = None
        self.epoch = epoch
        self.batch = batch


class CheckpointError(GlycoError):
    """Checkpoint bytes are corrupt or from an unsupported version."""
