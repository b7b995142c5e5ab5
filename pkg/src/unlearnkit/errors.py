"""Exception taxonomy shared by every module.

Each error class maps to one CLI exit code, so library code raises these
instead of bare ValueError/RuntimeError wherever the failure is meaningful
to a caller.
"""

from __future__ import annotations


class UnlearnKitError(Exception):
    """Base class for all package errors."""


class ParameterError(UnlearnKitError):
    """An argument is out of range, inconsistent, or otherwise unusable."""


class ShapeError(ParameterError):
    """Array dimensions do not match the declared architecture or dataset."""


class IngestionError(UnlearnKitError):
    """A data file could not be parsed; the message names row and column."""


class TrainingError(UnlearnKitError):
    """Optimization diverged or produced non-finite values."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class SolverError(UnlearnKitError):
    """A linear solve failed; carries the last residual for diagnosis."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class ConfigError(UnlearnKitError):
    """An experiment config is missing or malformed; message gives the path."""


class PrerequisiteError(UnlearnKitError):
    """A required artifact from an earlier pipeline stage does not exist."""
