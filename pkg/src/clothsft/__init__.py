"""Differentiable cloth simulation and monocular shape-from-template reconstruction."""

from .geometry import ClothMesh, MeshError, build_template, compute_masses, rest_quantities
from .physics import ClothState, SimParams, SolverConfig, Stiffness, simulate, step

__all__ = [
    "ClothMesh",
    "MeshError",
    "build_template",
    "compute_masses",
    "rest_quantities",
    "ClothState",
    "SimParams",
    "SolverConfig",
    "Stiffness",
    "simulate",
    "step",
]

__version__ = "0.1.0"
