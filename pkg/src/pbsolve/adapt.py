"""Marking strategies and the solve-estimate-mark-refine driver."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .estimator import (GoalFunctional, indicator_energy, indicator_goal_linear,
                        indicator_goal_quadratic, mollified_goal_vector,
                        solvation_energy, solve_dual)
from .fespace import FESpace, FieldVector, prolongation
from .mesh import MeshHierarchy, SOLUTE, SOLVENT, bisect_refine
from .mlsolve import PreconditionerConfig, build_level_stack, make_preconditioner, pcg
from .problem import newton_solve

__all__ = ["MarkingConfig", "AmrRow", "AmrReport", "AmrOptions", "AmrResult",
           "mark_global", "mark_split", "amr_run"]

log = logging.getLogger("pbsolve")

INDICATORS = ("ENERGY", "GOAL_LINEAR", "GOAL_QUADRATIC")


@dataclass
class MarkingConfig:
    strategy: str = "GLOBAL"
    gamma: float = 0.5
    indicator: str = "ENERGY"

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        self.indicator = self.indicator.upper()
        if self.strategy not in ("GLOBAL", "SPLIT"):
            raise ValueError(f"unknown marking strategy {self.strategy!r}")
        if self.indicator not in INDICATORS:
            raise ValueError(f"unknown indicator {self.indicator!r}")
        # gamma = 1 marks nothing and gamma = 0 refines uniformly; both
        # endpoints are rejected
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly in (0, 1), got {self.gamma}")


def mark_global(indicator, gamma):
    """Elements whose indicator magnitude exceeds gamma times the maximum."""
    eta = np.asarray(indicator.marking_values() if hasattr(indicator, "marking_values")
                     else indicator, dtype=np.float64)
    m = eta.max(initial=0.0)
    if m <= 0.0:
        raise ValueError("estimator identically zero: nothing to mark")
    return np.where(eta > gamma * m)[0]


def mark_split(indicator, gamma, labels):
    """Per-subdomain marking: each region is thresholded against its own
    maximum, which forces refinement in both regions."""
    eta = np.asarray(indicator.marking_values() if hasattr(indicator, "marking_values")
                     else indicator, dtype=np.float64)
    labels = np.asarray(labels)
    marked = []
    any_positive = False
    for lab in (SOLUTE, SOLVENT):
        ids = np.where(labels == lab)[0]
        if ids.size == 0:
            raise ValueError("mark_split needs both subdomains to be nonempty")
        m = eta[ids].max()
        if m <= 0.0:
            continue        # a region with all-zero indicator contributes nothing
        any_positive = True
        marked.append(ids[eta[ids] > gamma * m])
    if not any_positive:
        raise ValueError("estimator identically zero: nothing to mark")
    return np.unique(np.concatenate(marked))


@dataclass
class AmrRow:
    level: int
    n_nodes: int
    n_dofs: int
    marked_solute: int
    marked_solvent: int
    energy_kbt: float
    estimate: float
    cg_iters: int
    newton_iters: int
    seconds: float


@dataclass
class AmrReport:
    rows: list = field(default_factory=list)


@dataclass
class AmrOptions:
    max_levels: int = 5
    max_dof: int = 200_000
    estimate_tol: float = 0.0          # 0 disables tolerance-based termination
    bc_kind: str = "SCREENED"
    linear: bool = False
    pcg_tol: float = 1e-8
    pcg_max_iter: int = 1000
    newton_tol: float = 1e-8
    newton_max_iter: int = 20
    sigma: float = 0.0                 # 0 selects the per-atom default rule
    erm_flux: str = "average"
    timing: bool = False
    relabel: object = None             # optional centroid labeling rule for refinement


@dataclass
class AmrResult:
    report: AmrReport
    hierarchy: MeshHierarchy
    solution: FieldVector
    stack: object


def _goal_functional(system, mesh, options):
    if options.sigma > 0.0:
        return GoalFunctional(system, options.sigma)
    return GoalFunctional.with_default_sigma(system, mesh)


def _estimate(u, system, params, marking, options):
    if marking.indicator == "ENERGY":
        return indicator_energy(u, system, params)
    space = u.space
    goal = _goal_functional(system, space.mesh, options)
    if marking.indicator == "GOAL_QUADRATIC":
        sp2 = FESpace(space.mesh, 2)
        s2 = mollified_goal_vector(sp2, goal)
        w2 = solve_dual(sp2, params, s2)
        return indicator_goal_quadratic(u, w2, system, params)
    s1 = mollified_goal_vector(space, goal)
    w1 = solve_dual(space, params, s1)
    return indicator_goal_linear(u, w1, goal, params, flux=options.erm_flux)


def amr_run(mesh, system, params, marking, precond=None, options=None):
    """Adaptive refinement loop: solve, estimate, mark, refine.

    Runs until ``max_levels`` refinements were performed, the dof count
    reaches ``max_dof``, or (when ``estimate_tol > 0``) the global estimate
    magnitude drops below the tolerance.  Each level's solve warm-starts
    from the prolonged previous solution.  Returns an AmrResult whose
    report holds one row per level.
    """
    precond = precond or PreconditionerConfig()
    options = options or AmrOptions()
    hierarchy = MeshHierarchy(mesh)
    u = None
    report = AmrReport()
    stack = None

    for level in range(options.max_levels + 1):
        t0 = time.perf_counter()
        space = FESpace(hierarchy.finest, 1)
        stack = build_level_stack(hierarchy, params, precond)

        cg_count = 0

        def linear_solver(A, rhs, x0, rtol):
            nonlocal cg_count
            M = make_preconditioner(stack, top_matrix=A)
            x, its, _ = pcg(A, rhs, preconditioner=M, tol=rtol,
                            max_iter=options.pcg_max_iter, x0=x0)
            cg_count += its
            return x, its

        x0 = None
        if u is not None:
            x0 = prolongation(hierarchy, hierarchy.n_levels - 1) @ u.values
        u, ninfo = newton_solve(space, system, params, linear_solver,
                                tol=options.newton_tol,
                                max_iter=options.newton_max_iter,
                                bc_kind=options.bc_kind,
                                linear=options.linear, x0=x0)

        energy = solvation_energy(u, system)
        indicator = _estimate(u, system, params, marking, options)
        estimate = indicator.global_estimate()

        n_nodes = hierarchy.finest.n_vertices
        stop = (
            level == options.max_levels
            or n_nodes >= options.max_dof
            or (options.estimate_tol > 0.0 and abs(estimate) <= options.estimate_tol)
        )
        if stop:
            marked = np.zeros(0, dtype=np.int64)
        elif marking.strategy == "GLOBAL":
            marked = mark_global(indicator, marking.gamma)
        else:
            marked = mark_split(indicator, marking.gamma, hierarchy.finest.labels)

        labels = hierarchy.finest.labels
        seconds = time.perf_counter() - t0 if options.timing else 0.0
        report.rows.append(AmrRow(
            level=level,
            n_nodes=n_nodes,
            n_dofs=space.n_dofs,
            marked_solute=int((labels[marked] == SOLUTE).sum()),
            marked_solvent=int((labels[marked] == SOLVENT).sum()),
            energy_kbt=energy,
            estimate=estimate,
            cg_iters=cg_count,
            newton_iters=ninfo.iterations,
            seconds=seconds,
        ))
        log.info("level %d: N=%d S=%.6f kT estimate=%.3e marked=%d",
                 level, n_nodes, energy, estimate, marked.size)
        if stop:
            break
        bisect_refine(hierarchy, marked, relabel=options.relabel)

    return AmrResult(report, hierarchy, u, stack)
