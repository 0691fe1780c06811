"""Simulation and limit-theorem diagnostics for random walks on GL_d(R)."""

from .errors import ConfigError, NumericalError
from .geometry import ProjectivePoint
from .measures import MatrixMeasure

__all__ = ["ConfigError", "MatrixMeasure", "NumericalError", "ProjectivePoint"]
__version__ = "0.1.0"
