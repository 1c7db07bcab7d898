"""Exception hierarchy shared across the package."""
from __future__ import annotations


class SphemuError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SphemuError, ValueError):
    pass


class InvalidDataError(SphemuError, ValueError):
    pass


class InvalidStateError(SphemuError, RuntimeError):
    pass


class GridMismatchError(InvalidArgumentError):
    pass


class DivergedSimulationError(SphemuError, FloatingPointError):
    """A rollout produced non-finite values."""

    def __init__(self, message: str, window: int | None = None, member: int | None = None):
        super().__init__(message)
        self.window = window
        self.member = member


class ConfigurationError(SphemuError, RuntimeError):
    """The reference simulation went unstable for the given configuration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CorruptDatasetError(SphemuError, OSError):
    def __init__(self, message: str, variable: str | None = None):
        super().__init__(message)
        self.variable = variable


class UnsupportedVersionError(SphemuError, ValueError):
    pass
