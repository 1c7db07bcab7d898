"""Spherical neural-operator climate emulation with cold-sampling inference."""

__version__ = "0.1.0"

from sphemu.errors import (  # noqa: E402
    ConfigurationError,
    CorruptDatasetError,
    DivergedSimulationError,
    GridMismatchError,
    InvalidArgumentError,
    InvalidDataError,
    InvalidStateError,
    SphemuError,
    UnsupportedVersionError,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "CorruptDatasetError",
    "DivergedSimulationError",
    "GridMismatchError",
    "InvalidArgumentError",
    "InvalidDataError",
    "InvalidStateError",
    "SphemuError",
    "UnsupportedVersionError",
]
