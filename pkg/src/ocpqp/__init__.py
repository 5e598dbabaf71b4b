"""Structured augmented-Lagrangian QP solver for linear-quadratic optimal control."""

from .alm import SolveReport, Solver, SolverSettings, solve
from .bench import SpringMassConfig, gen_random_ocp, gen_spring_mass
from .compact import (
    CompactBatch,
    KernelConfig,
    NonPositivePivot,
    ZeroDiagonal,
    batch_gemm,
    batch_potrf,
    batch_syrk,
    batch_trsm,
    batch_trtri,
    pack,
    unpack,
)
from .kkt import StructureMismatch
from .model import (
    OcpDims,
    OcpProblem,
    ValidationReport,
    load_problem,
    mul_G,
    mul_GT,
    mul_M,
    mul_MT,
    mul_Q,
    pad_horizon,
    save_problem,
    validate,
)

__version__ = "0.1.0"
__all__ = [
    "CompactBatch",
    "KernelConfig",
    "NonPositivePivot",
    "StructureMismatch",
    "ZeroDiagonal",
    "batch_gemm",
    "batch_potrf",
    "batch_syrk",
    "batch_trsm",
    "batch_trtri",
    "pack",
    "unpack",
    "OcpDims",
    "OcpProblem",
    "ValidationReport",
    "load_problem",
    "save_problem",
    "mul_M",
    "mul_MT",
    "mul_G",
    "mul_GT",
    "mul_Q",
    "pad_horizon",
    "validate",
    "SolveReport",
    "Solver",
    "SolverSettings",
    "solve",
    "SpringMassConfig",
    "gen_random_ocp",
    "gen_spring_mass",
]
