"""Nonlinear FETI-DP solvers for high-contrast p-Laplace problems.

Coarse spaces: subdomain vertices, adaptive per-edge eigenvalue constraints,
and learned constraints from regression/classification networks.
"""

from .geometry import build_mesh, enumerate_interface, build_partition
from .coefficients import PatternSpec, CoefficientField, generate, sample_on_grid

__all__ = [
    "build_mesh",
    "enumerate_interface",
    "build_partition",
    "PatternSpec",
    "CoefficientField",
    "generate",
    "sample_on_grid",
]

__version__ = "0.1.0"
