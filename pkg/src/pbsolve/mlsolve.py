"""Preconditioned conjugate gradients with local multilevel preconditioners.

The multiplicative V-cycle smooths only a per-level node subset (full set
for classical MG; HB/BPX/BEK/ONERING restrict it to neighborhoods of the
refined region), restricts with the exact transpose of the interpolation,
and solves the coarsest level directly.  Additive BPX/HB appliers with the
level scaling 2^(j(d-2)), d = 3, are provided as preconditioner variants.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
from numba import njit

from .fespace import FESpace, apply_dirichlet, prolongation
from .mesh import smoothing_set

__all__ = [
    "PreconditionerConfig",
    "LevelStack",
    "SolverError",
    "build_level_stack",
    "sgs_smooth",
    "mg_vcycle",
    "additive_apply",
    "make_preconditioner",
    "pcg",
    "complexity_report",
]

MULTIPLICATIVE = ("MG", "HB", "BPX", "BEK", "ONERING")
ADDITIVE = ("ADDITIVE_BPX", "ADDITIVE_HB")


class SolverError(RuntimeError):
    """Iterative solve failed; carries the residual history."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass
class PreconditionerConfig:
    variant: str = "MG"
    pre_smooth: int = 2
    post_smooth: int = 2
    coarse_direct: bool = True

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in MULTIPLICATIVE + ADDITIVE + ("NONE",):
            raise ValueError(f"unknown preconditioner variant {self.variant!r}")
        if self.variant in MULTIPLICATIVE and (self.pre_smooth < 1 or self.post_smooth < 1):
            raise ValueError("multiplicative variants need pre/post smoothing sweeps >= 1")


@njit(cache=True)
def _gs_pass(indptr, indices, data, u, f, order):
    for idx in order:
        s = f[idx]
        diag = 0.0
        for p in range(indptr[idx], indptr[idx + 1]):
            j = indices[p]
            if j == idx:
                diag = data[p]
            else:
                s -= data[p] * u[j]
        if diag == 0.0:
            raise ZeroDivisionError("zero diagonal entry in smoothing set")
        u[idx] = s / diag


def _sgs_inplace(A, u, f, order, sweeps):
    rev = order[::-1].copy()
    for _ in range(sweeps):
        _gs_pass(A.indptr, A.indices, A.data, u, f, order)
        _gs_pass(A.indptr, A.indices, A.data, u, f, rev)


def sgs_smooth(A, u, f, smooth_set, sweeps=1):
    """Symmetric Gauss-Seidel sweeps restricted to the given node set.

    Each sweep runs one forward pass over the set in ascending index order
    and one backward pass; indices outside the set are left untouched.
    Returns the updated vector.
    """
    u = np.array(u, dtype=np.float64, copy=True)
    order = np.asarray(smooth_set, dtype=np.int64)
    if order.size == 0 or sweeps == 0:
        return u
    A = A.tocsr()
    diag = A.diagonal()[order]
    if np.any(diag == 0.0):
        bad = order[np.where(diag == 0.0)[0][0]]
        raise ValueError(f"zero diagonal entry at smoothed index {bad}")
    _sgs_inplace(A, u, np.asarray(f, dtype=np.float64), order, sweeps)
    return u


@dataclass
class LevelStack:
    """Per-level operators, transfers and smoothing sets for one hierarchy.

    ``matrices[j]`` is the Dirichlet-eliminated symmetric operator of level
    ``j``; ``prolongations[j]`` interpolates level j-1 nodes to level j
    (index 0 unused); restriction is its transpose with the coarse boundary
    entries zeroed.
    """

    matrices: list
    prolongations: list
    smooth_sets: list
    boundary_dofs: list
    config: PreconditionerConfig
    fine_nodes: list
    _coarse_lu: object = None
    _sub_cache: dict = field(default_factory=dict)
    _composite: list = None

    @property
    def n_levels(self):
        return len(self.matrices)

    def coarse_solve(self, f):
        if self._coarse_lu is None:
            self._coarse_lu = sla.lu_factor(self.matrices[0].toarray())
        return sla.lu_solve(self._coarse_lu, f)

    def composite_prolongations(self):
        """P_j mapping level-j coefficients to the finest level."""
        if self._composite is None:
            J = self.n_levels - 1
            comp = [None] * self.n_levels
            comp[J] = sp.identity(self.matrices[J].shape[0], format="csr")
            for j in range(J - 1, -1, -1):
                comp[j] = (comp[j + 1] @ self.prolongations[j + 1]).tocsr()
            self._composite = comp
        return self._composite

    def sgs_submatrix(self, level, idx):
        """Cached (D+L, D, D+U) triangular pieces of A[idx][:, idx]."""
        key = (level, idx.tobytes())
        out = self._sub_cache.get(key)
        if out is None:
            Asub = self.matrices[level][idx][:, idx].tocsr()
            lower = sp.tril(Asub, 0).tocsr()
            upper = sp.triu(Asub, 0).tocsr()
            out = (lower, Asub.diagonal(), upper)
            self._sub_cache[key] = out
        return out


def build_level_stack(hierarchy, params, config, bc_space_degree=1):
    """Assemble the eliminated reaction-field operator of every level plus
    the transfers and smoothing sets the configured variant needs."""
    from .problem import assemble_operator_for

    matrices = []
    boundary = []
    fine_nodes = []
    for mesh in hierarchy.meshes:
        space = FESpace(mesh, bc_space_degree)
        A = assemble_operator_for(space, params)
        A, _ = apply_dirichlet(A, np.zeros(space.n_dofs), space, 0.0)
        matrices.append(A)
        boundary.append(space.boundary_dofs)
    prolongs = [None]
    for j in range(1, hierarchy.n_levels):
        prolongs.append(prolongation(hierarchy, j))
    sets = [None]
    set_variant = {
        "MG": "MG", "HB": "HB", "BPX": "BPX", "BEK": "BEK", "ONERING": "ONERING",
        "ADDITIVE_BPX": "BPX", "ADDITIVE_HB": "HB", "NONE": "MG",
    }[config.variant]
    for j in range(1, hierarchy.n_levels):
        sets.append(smoothing_set(hierarchy, j, set_variant))
    for j in range(hierarchy.n_levels):
        fine_nodes.append(hierarchy.fine_nodes[j])
    return LevelStack(matrices, prolongs, sets, boundary, config, fine_nodes)


def mg_vcycle(stack, u, f, level, top_matrix=None):
    """One multiplicative V-cycle on the given level.

    Steps: direct solve on the coarsest level; otherwise pre-smooth on the
    level's smoothing set, restrict the residual with the interpolation
    transpose, recurse from a zero coarse guess, add the interpolated
    correction, post-smooth.
    """
    A = stack.matrices[level] if top_matrix is None else top_matrix
    if level == 0:
        if stack.config.coarse_direct:
            return stack.coarse_solve(f)
        return sgs_smooth(A, u, f, np.arange(A.shape[0]), sweeps=20)
    cfg = stack.config
    u = sgs_smooth(A, u, f, stack.smooth_sets[level], cfg.pre_smooth)
    r = f - A @ u
    rc = stack.prolongations[level].T @ r
    rc[stack.boundary_dofs[level - 1]] = 0.0
    e = mg_vcycle(stack, np.zeros_like(rc), rc, level - 1)
    u = u + stack.prolongations[level] @ e
    return sgs_smooth(A, u, f, stack.smooth_sets[level], cfg.post_smooth)


def _apply_sgs_matrix(lower, diag, upper, r):
    # G r = (D+U)^{-1} D (D+L)^{-1} r
    y = sp.linalg.spsolve_triangular(lower, r, lower=True)
    return sp.linalg.spsolve_triangular(upper, diag * y, lower=False)


def additive_apply(stack, r, variant=None, smoothed=False):
    """Additive multilevel preconditioner  z = sum_j P_j D_j P_j^T r.

    P_j is the composite interpolation from level j to the finest level with
    columns restricted to the variant's per-level index set (all fine nodes
    for HB, the refinement-region set for BPX; every node on level 0).
    D_j is 2^j times the identity, or the symmetric Gauss-Seidel matrix of
    the restricted submatrix when ``smoothed`` is set.
    """
    variant = (variant or stack.config.variant).upper()
    if variant not in ADDITIVE:
        raise ValueError(f"additive_apply needs an additive variant, got {variant!r}")
    comp = stack.composite_prolongations()
    z = np.zeros_like(r)
    for j in range(stack.n_levels):
        n_j = stack.matrices[j].shape[0]
        if j == 0:
            idx = np.arange(n_j, dtype=np.int64)
        elif variant == "ADDITIVE_HB":
            idx = stack.fine_nodes[j]
        else:
            idx = stack.smooth_sets[j]
        cols = comp[j][:, idx]
        rj = cols.T @ r
        if smoothed:
            lower, diag, upper = stack.sgs_submatrix(j, idx)
            zj = _apply_sgs_matrix(lower, diag, upper, rj)
        else:
            zj = (2.0 ** j) * rj
        z += cols @ zj
    return z


def make_preconditioner(stack, top_matrix=None, smoothed_additive=True):
    """Callable z = M^{-1} r for PCG from a level stack."""
    variant = stack.config.variant
    if variant == "NONE":
        return None
    if variant in ADDITIVE:
        return lambda r: additive_apply(stack, r, variant, smoothed=smoothed_additive)
    top = stack.n_levels - 1
    return lambda r: mg_vcycle(stack, np.zeros_like(r), r, top, top_matrix=top_matrix)


def pcg(A, b, preconditioner=None, tol=1e-8, max_iter=500, x0=None):
    """Preconditioned conjugate gradients for symmetric positive definite A.

    Stops when ||b - A x||_2 <= tol * ||b||_2.  Returns (x, iterations,
    residual-norm history); raises SolverError on breakdown or when the
    iteration budget is exhausted.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64, copy=True)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    target = tol * bnorm
    history = [np.linalg.norm(r)]
    if history[0] <= target or bnorm == 0.0:
        return x, 0, history
    z = preconditioner(r) if preconditioner else r
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError(
                f"conjugate gradient breakdown: p^T A p = {pAp:.3g} <= 0 "
                "(operator or preconditioner is not positive definite)", history
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        history.append(np.linalg.norm(r))
        if history[-1] <= target:
            return x, k, history
        z = preconditioner(r) if preconditioner else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"PCG did not reach tol {tol:g} in {max_iter} iterations "
        f"(relative residual {history[-1] / bnorm:.3g})", history
    )


# Appendix-style complexity bound constants: sum of smoothed nodes over all
# levels against (5/3) N_J - (2/3) N_0.  The bound is proven for a different
# refinement routine, so it is reported as a diagnostic, never asserted.
LEMMA_COEFFS = (5.0 / 3.0, 2.0 / 3.0)


def complexity_report(stack):
    """Per-level smoothing cost table.

    Returns (rows, bound_holds) where each row is
    (level, N_j, X_j, X_j / N_j, cumulative sum of X_j); level 0 counts all
    nodes (it is solved directly).
    """
    rows = []
    cum = 0
    for j in range(stack.n_levels):
        n_j = stack.matrices[j].shape[0]
        x_j = n_j if j == 0 else int(len(stack.smooth_sets[j]))
        cum += x_j
        rows.append((j, n_j, x_j, x_j / n_j, cum))
    n0 = rows[0][1]
    nJ = rows[-1][1]
    bound_holds = cum <= LEMMA_COEFFS[0] * nJ - LEMMA_COEFFS[1] * n0
    return rows, bound_holds
