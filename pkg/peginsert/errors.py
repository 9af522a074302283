"""Exception types for peginsert.

Library code raises these; only the command-line interface catches them and
turns them into an exit status.
"""

from typing import Optional


class PegInsertError(Exception):
    """Base class for all peginsert errors."""


class InvalidConfig(PegInsertError, ValueError):
    """A configuration value is missing, out of range or inconsistent."""


class InvalidSpec(PegInsertError, ValueError):
    """An experiment spec or ablation matrix cannot be run as written."""


class NonPositiveClearance(PegInsertError, ValueError):
    """The hole is not strictly larger than the peg."""


class InvalidShape(PegInsertError, ValueError):
    """A cross-section is degenerate (zero area, non-positive radius)."""


class NonConvexShape(InvalidShape):
    """A polygon cross-section is concave or self-intersecting."""


class UnknownShape(PegInsertError, KeyError):
    """A shape name is not in the catalogue."""


class EpisodeFinished(PegInsertError, RuntimeError):
    """step() was called on an environment whose episode is done."""


class MissingWrench(PegInsertError, ValueError):
    """The safety lock was given an observation with the wrench masked out."""


class InsufficientHistory(PegInsertError, ValueError):
    """The safety lock needs at least two recorded samples."""


class NonFiniteOutput(PegInsertError, ArithmeticError):
    """A network produced NaN or infinite values."""


class NonFiniteGradient(PegInsertError, ArithmeticError):
    """A PPO minibatch produced NaN or infinite gradients."""

    def __init__(self, minibatch_index: int, message: Optional[str] = None):
        self.minibatch_index = minibatch_index
        super().__init__(message or f"Non-finite gradient in minibatch {minibatch_index}")


class IncompatibleCheckpoint(PegInsertError, ValueError):
    """A checkpoint does not match the experiment it is evaluated under."""


class SchemaMismatch(PegInsertError, ValueError):
    """A CSV file does not carry the expected columns."""


class ReplayDivergence(PegInsertError):
    """A replayed value differs from the logged one."""

    def __init__(self, step: int, column: str, logged: float, replayed: float):
        self.step = step
        self.column = column
        self.logged = logged
        self.replayed = replayed
        super().__init__(
            f"Replay diverged at step {step} in column '{column}': "
            f"logged {logged!r}, replayed {replayed!r}"
        )
