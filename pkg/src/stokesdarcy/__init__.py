"""Mixed finite elements for coupled Stokes-Darcy flow with projection-based interface coupling."""

from .assembly import CompatibilityWarning, CoupledSystem, ProblemCoefficients, assemble_system
from .coupling import build_coupling, darcy_trace_space, projection_residual
from .harness import StudyConfig, StudyError, StudyRecord, emit, load_preset, rate, run_study
from .mesh import MeshError, MeshPair, build_pair, build_structured
from .mms import ErrorReport, ExactSolution, compute_errors, desk_solution_2d, get_solution, paper_solution_3d
from .solver import SingularSystemError, SolutionFields, estimate_infsup, solve
from .spaces import PAIRS, build_spaces, get_pair

__version__ = "0.1.0"

__all__ = [
    "CompatibilityWarning", "CoupledSystem", "ProblemCoefficients", "assemble_system",
    "build_coupling", "darcy_trace_space", "projection_residual",
    "StudyConfig", "StudyError", "StudyRecord", "emit", "load_preset", "rate", "run_study",
    "MeshError", "MeshPair", "build_pair", "build_structured",
    "ErrorReport", "ExactSolution", "compute_errors", "desk_solution_2d", "get_solution", "paper_solution_3d",
    "SingularSystemError", "SolutionFields", "estimate_infsup", "solve",
    "PAIRS", "build_spaces", "get_pair",
]
