"""Lensless image reconstruction with a learned primal-dual network."""

from .core import ImageField, SensorGeometry, read_tensor, write_tensor
from .optics import Psf, adjoint, forward, normalize_psf

__version__ = "0.1.0"

__all__ = ["ImageField", "SensorGeometry", "Psf", "forward", "adjoint", "normalize_psf",
           "read_tensor", "write_tensor"]
