"""Matrix-free elastodynamics with a learned initial-guess predictor and a two-lane scheduler."""

from .cg import SolveReport, pcg_solve, pcg_solve_multi
from .elasticity import Material, build_element_operators
from .mesh import BoxMeshSpec, Mesh, generate_box_mesh, partition_predictor_regions
from .pipeline import phase_timeline, run_pipeline
from .predictor import ODPredictor, SController, adjust_s
from .timeloop import Impulse, RunConfig, build_problem, run_single_lane

__version__ = "0.1.0"

__all__ = [
    "BoxMeshSpec", "Impulse", "Material", "Mesh", "ODPredictor", "RunConfig", "SController",
    "SolveReport", "adjust_s", "build_element_operators", "build_problem", "generate_box_mesh",
    "partition_predictor_regions", "pcg_solve", "pcg_solve_multi", "phase_timeline",
    "run_pipeline", "run_single_lane",
]
