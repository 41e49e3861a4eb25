"""Exception hierarchy for the ensemble federated learning simulator."""
from typing import Optional


class EflError(Exception):
    """Base class for every error raised by the simulator.

    ``round_index`` is filled in by the round loop when the failure happens
    inside a learning round, so messages read ``[round 17] ...``.
    """

    def __init__(self, message: str, round_index: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.round_index = round_index

    def __str__(self) -> str:
        if self.round_index is not None:
            return f"[round {self.round_index}] {self.message}"
        return self.message


class InvalidInputError(EflError, ValueError):
    """Non-finite values, dimension mismatches and other bad arguments."""


class DataParseError(EflError):
    """A dataset file could not be read; names the row and column when known."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class SizingError(EflError, ValueError):
    """A dataset, split or sample request is too small or too large."""


class TrainingError(EflError):
    """Training a pre-trained model failed."""

    def __init__(self, message: str, model_index: Optional[int] = None, family: Optional[str] = None):
        if model_index is not None:
            message = f"model {model_index} ({family}): {message}"
        super().__init__(message)
        self.model_index = model_index
        self.family = family


class NumericStateError(EflError):
    """Weights, probabilities or estimates left the finite positive range."""


class ConfigError(EflError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: Optional[str] = None):
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class BandwidthInfeasibleError(EflError):
    """The client-to-server bandwidth cannot carry even one client's losses."""


class ContractViolationError(EflError):
    """An internal precondition or invariant did not hold."""


class DiagnosticUnavailableError(EflError):
    """A report-only diagnostic cannot be computed for this instance."""


class TraceUnavailableError(EflError):
    """A metric needs trace data that was not recorded (e.g. the oracle channel)."""
