"""Coronary-calcium motion artifacts: simulation, bridge-diffusion correction and scoring."""

from .exceptions import DomainError, NumericalError, ValidationError
from .grid import BinaryMask, VoxelGrid, denormalize, normalize

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "DomainError", "NumericalError", "ValidationError", "VoxelGrid",
    "denormalize", "normalize", "__version__",
]
