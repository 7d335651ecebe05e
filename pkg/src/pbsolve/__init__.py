"""Adaptive finite element solver for the regularized Poisson-Boltzmann
equation with goal-oriented refinement and local multilevel preconditioning."""

from .mesh import (SOLUTE, SOLVENT, MeshHierarchy, SimplicialMesh, bisect_refine,
                   mesh_geometry, read_mesh, smoothing_set, write_mesh)
from .fespace import (FESpace, FieldVector, apply_dirichlet, assemble_operator,
                      evaluate, prolongation)
from .problem import (COULOMB_CONSTANT_298K, MolecularSystem, PBEParameters,
                      assemble_lrpbe, coulomb, newton_solve, parse_pqr,
                      rpbe_jacobian, rpbe_residual)
from .estimator import (GoalFunctional, IndicatorField, indicator_energy,
                        indicator_goal_linear, indicator_goal_quadratic,
                        mollified_goal_vector, solvation_energy, solve_dual)
from .adapt import AmrOptions, MarkingConfig, amr_run, mark_global, mark_split
from .mlsolve import (LevelStack, PreconditionerConfig, additive_apply,
                      build_level_stack, complexity_report, mg_vcycle, pcg,
                      sgs_smooth)
from .cli import RunConfig, generate_born_mesh, run

__version__ = "0.1.0"
