"""Projection-operator master equations on finite system + bath models."""

from .core import DimensionError, ValidationError, trace_distance
from .model import ModelSpec, build_friedrichs_model, build_small_model, build_spin_bath_model
from .liouville import bohr_decomposition, build_projectors, verify_projector_algebra
from .nz import (
    correlation_term,
    memory_kernel,
    propagate_exact,
    R_operator,
    solve_nz,
    vanhove_generator,
    verify_recurrence,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "ValidationError", "trace_distance", "ModelSpec",
    "build_friedrichs_model", "build_small_model", "build_spin_bath_model",
    "bohr_decomposition", "build_projectors", "verify_projector_algebra",
    "correlation_term", "memory_kernel", "propagate_exact", "R_operator", "solve_nz",
    "vanhove_generator", "verify_recurrence",
]
