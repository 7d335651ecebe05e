"""Molecular systems and the regularized Poisson-Boltzmann problem.

The electrostatic potential is split into the analytic Coulomb part of the
fixed charges (computed in a uniform solute dielectric) and a finite element
reaction part.  This module assembles the linear reaction-field system,
evaluates the nonlinear weak residual and its Jacobian, and drives the
damped inexact Newton iteration.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import FESpace, FieldVector, apply_dirichlet, lift_boundary
from .mesh import SOLVENT
from .quadrature import tet_rule

__all__ = [
    "COULOMB_CONSTANT_298K",
    "KBT_KCAL_PER_MOL_298K",
    "MolecularSystem",
    "PBEParameters",
    "parse_pqr",
    "coulomb",
    "boundary_potential",
    "assemble_lrpbe",
    "rpbe_residual",
    "rpbe_jacobian",
    "newton_solve",
    "NewtonError",
]

log = logging.getLogger("pbsolve")

# e^2 / (4 pi eps0 kB T) at T = 298.15 K, in Angstrom (CODATA 2018 constants:
# e = 1.602176634e-19 C, kB = 1.380649e-23 J/K, eps0 = 8.8541878128e-12 F/m).
COULOMB_CONSTANT_298K = 560.4593221475344

# kB T in kcal/mol at 298.15 K, for reporting only.
KBT_KCAL_PER_MOL_298K = 0.592484949713764


class NewtonError(RuntimeError):
    """Newton iteration failed; carries the residual-norm history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass
class MolecularSystem:
    """Fixed point charges: positions (Angstrom), charges (e), radii (Angstrom)."""

    positions: np.ndarray
    charges: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.charges = np.atleast_1d(np.asarray(self.charges, dtype=np.float64))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=np.float64))
        n = self.positions.shape[0]
        if n == 0:
            raise ValueError("no atoms")
        if self.positions.shape != (n, 3) or self.charges.shape != (n,) or self.radii.shape != (n,):
            raise ValueError("positions, charges and radii have inconsistent shapes")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite atom position")
        if np.any(self.radii <= 0.0):
            raise ValueError("atom radii must be positive")

    @property
    def n_atoms(self):
        return self.positions.shape[0]


@dataclass
class PBEParameters:
    """Dielectric and ionic parameters of the implicit-solvent model.

    eps_m / eps_s      : solute / solvent dielectric constants
    kappa_s            : modified Debye-Hueckel parameter in the solvent (1/Angstrom);
                         zero inside the solute
    coulomb_constant   : e^2/(kB T) prefactor in Angstrom
    temperature        : only used to convert reported energies
    """

    eps_m: float = 2.0
    eps_s: float = 80.0
    kappa_s: float = 0.0
    coulomb_constant: float = COULOMB_CONSTANT_298K
    temperature: float = 298.15

    def __post_init__(self):
        if not 0.0 < self.eps_m <= self.eps_s:
            raise ValueError(f"need 0 < eps_m <= eps_s, got {self.eps_m}, {self.eps_s}")
        if self.kappa_s < 0.0:
            raise ValueError("kappa_s must be nonnegative")
        if self.coulomb_constant <= 0.0:
            raise ValueError("coulomb_constant must be positive")

    @property
    def eps(self):
        """Per-region dielectric, indexed by element label."""
        return np.array([self.eps_m, self.eps_s])

    @property
    def kappa2(self):
        """Per-region kappa^2, indexed by element label (zero in the solute)."""
        return np.array([0.0, self.kappa_s ** 2])


def parse_pqr(text):
    """Build a MolecularSystem from PQR text (ATOM/HETATM records).

    The last five whitespace-separated fields of each record are read as
    x, y, z, charge, radius; all other record types are ignored.
    """
    pos, q, r = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        rec = line.split()
        if not rec or rec[0] not in ("ATOM", "HETATM"):
            continue
        if len(rec) < 6:
            raise ValueError(f"line {lineno}: ATOM record with fewer than 6 fields")
        try:
            vals = [float(x) for x in rec[-5:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: non-numeric coordinate field ({exc})") from None
        if vals[4] <= 0.0:
            raise ValueError(f"line {lineno}: radius must be positive, got {vals[4]}")
        pos.append(vals[:3])
        q.append(vals[3])
        r.append(vals[4])
    if not pos:
        raise ValueError("no atoms")
    return MolecularSystem(np.array(pos), np.array(q), np.array(r))


def coulomb(system, params, points):
    """Coulomb potential of the fixed charges in a uniform eps_m medium.

    Returns (values, gradients) with gradients of shape (..., 3); both are
    exact analytic expressions.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = pts[:, None, :] - system.positions[None, :, :]
    r = np.linalg.norm(d, axis=2)
    if np.any(r < 1e-12):
        i, j = np.argwhere(r < 1e-12)[0]
        raise ValueError(
            f"evaluation point {pts[i]} coincides with charge center {j} "
            "(the Coulomb field is singular there)"
        )
    c = params.coulomb_constant / params.eps_m
    u = c * (system.charges / r).sum(axis=1)
    grad = -c * np.einsum("pa,pax->px", system.charges / r ** 3, d)
    if single:
        return u[0], grad[0]
    return u, grad


def boundary_potential(system, params, kind):
    """Dirichlet data for the reaction potential on the outer boundary.

    SCREENED uses the single-sphere screened Coulomb field in the solvent
    dielectric minus the Coulomb part; ZERO is homogeneous (debugging).
    """
    kind = kind.upper()
    if kind == "ZERO":
        return lambda pts: np.zeros(np.atleast_2d(pts).shape[0])
    if kind != "SCREENED":
        raise ValueError(f"unknown boundary kind {kind!r}")

    kprime = params.kappa_s / np.sqrt(params.eps_s)

    def g(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        d = pts[:, None, :] - system.positions[None, :, :]
        r = np.linalg.norm(d, axis=2)
        u_s = (params.coulomb_constant / params.eps_s) * (
            system.charges * np.exp(-kprime * r) / r
        ).sum(axis=1)
        u_c, _ = coulomb(system, params, pts)
        return u_s - u_c

    return g


def _solvent_quadrature(space):
    """Quadrature data on solvent elements: ids, point coords, scaled weights."""
    mesh = space.mesh
    elems = np.where(mesh.labels == SOLVENT)[0]
    bary, w = tet_rule()
    pts = np.einsum("qk,ekx->eqx", bary, mesh.vertices[mesh.tets[elems]])
    wts = 6.0 * space.volumes[elems, None] * w[None, :]
    return elems, pts, wts


def _load_vector(space, system, params):
    """Dielectric and ionic load:  b_i = -((eps - eps_m) grad u_c, grad phi_i)
    - (kappa^2 u_c, phi_i).  Both integrands vanish on the solute."""
    elems, pts, wts = _solvent_quadrature(space)
    b = np.zeros(space.n_dofs)
    if elems.size == 0:
        return b
    flat = pts.reshape(-1, 3)
    uc, grad_uc = coulomb(system, params, flat)
    uc = uc.reshape(pts.shape[:2])
    grad_uc = grad_uc.reshape(pts.shape)

    vals, B = space.shape_tables()
    g = space.grad_lambda[elems]
    # grad phi_k at (e, q): sum_i B[q,k,i] g[e,i,:]
    grad_phi = np.einsum("qki,eix->eqkx", B, g)
    deps = params.eps[SOLVENT] - params.eps_m
    kap2 = params.kappa2[SOLVENT]
    be = -deps * np.einsum("eq,eqkx,eqx->ek", wts, grad_phi, grad_uc)
    be -= kap2 * np.einsum("eq,eq,qk->ek", wts, uc, vals)
    np.add.at(b, space.element_dofs[elems], be)
    return b


def assemble_lrpbe(space, system, params, bc_kind="SCREENED"):
    """Assemble the linear reaction-field system after Dirichlet elimination.

    Returns (A, b) with A symmetric positive definite; the solution of
    A x = b carries the boundary data on the boundary dofs.
    """
    A = assemble_operator_for(space, params)
    b = _load_vector(space, system, params)
    g = boundary_potential(system, params, bc_kind)
    return apply_dirichlet(A, b, space, g)


def assemble_operator_for(space, params):
    """Reaction-field bilinear form (eps grad u, grad v) + (kappa^2 u, v)."""
    from .fespace import assemble_operator

    return assemble_operator(space, params.eps, params.kappa2)


def _ionic_terms(space, u_vals, system, params, linear, want_matrix):
    """Quadrature evaluation of the ionic term (kappa^2 sinh(u + u_c), phi_i)
    and, if requested, its derivative matrix (kappa^2 cosh(u + u_c) phi_j, phi_i).

    sinh/cosh are evaluated only on solvent elements, where kappa^2 > 0 and
    the Coulomb field is far from its singularities.
    """
    elems, pts, wts = _solvent_quadrature(space)
    n = space.n_dofs
    vec = np.zeros(n)
    mat = None
    if elems.size == 0:
        if want_matrix:
            mat = sp.csr_matrix((n, n))
        return vec, mat

    flat = pts.reshape(-1, 3)
    uc, _ = coulomb(system, params, flat)
    uc = uc.reshape(pts.shape[:2])
    vals, _ = space.shape_tables()
    dofs = space.element_dofs[elems]
    u_q = np.einsum("qk,ek->eq", vals, u_vals[dofs])
    arg = u_q + uc
    if linear:
        s = arg
        c = np.ones_like(arg)
    else:
        amax = np.abs(arg).max()
        if amax > 700.0:
            raise FloatingPointError(
                f"sinh argument {amax:.3g} overflows; damp the Newton step or "
                "start from a better initial guess"
            )
        s = np.sinh(arg)
        c = np.cosh(arg)
    kap2 = params.kappa2[SOLVENT]
    ve = kap2 * np.einsum("eq,eq,qk->ek", wts, s, vals)
    np.add.at(vec, dofs, ve)
    if want_matrix:
        me = kap2 * np.einsum("eq,eq,qk,ql->ekl", wts, c, vals, vals)
        nd = dofs.shape[1]
        rows = np.repeat(dofs, nd, axis=1).ravel()
        cols = np.tile(dofs, (1, nd)).ravel()
        mat = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        mat = (0.5 * (mat + mat.T)).tocsr()
    return vec, mat


def rpbe_residual(space, u, system, params, linear=False):
    """Weak residual of the reaction-field equation at u.

    Entry i is L(phi_i) - (eps grad u, grad phi_i) - (kappa^2 sinh(u + u_c), phi_i),
    with boundary entries zeroed (test functions vanish there).  With
    ``linear=True`` the sinh is replaced by its argument.
    """
    from .fespace import assemble_operator

    u_vals = u.values if isinstance(u, FieldVector) else np.asarray(u, dtype=np.float64)
    stiff = assemble_operator(space, params.eps, [0.0, 0.0])
    b = _load_vector(space, system, params)
    ion, _ = _ionic_terms(space, u_vals, system, params, linear, want_matrix=False)
    res = b - stiff @ u_vals - ion
    res[space.boundary_dofs] = 0.0
    return res


def rpbe_jacobian(space, u, system, params, linear=False):
    """Derivative operator (eps grad w, grad v) + (kappa^2 cosh(u + u_c) w, v).

    Symmetric and positive definite (cosh >= 1); cosh is replaced by 1 when
    ``linear=True``, recovering the linear reaction-field operator.
    """
    from .fespace import assemble_operator

    u_vals = u.values if isinstance(u, FieldVector) else np.asarray(u, dtype=np.float64)
    stiff = assemble_operator(space, params.eps, [0.0, 0.0])
    _, mat = _ionic_terms(space, u_vals, system, params, linear, want_matrix=True)
    return (stiff + mat).tocsr()


@dataclass
class NewtonInfo:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    linear_iterations: int = 0


def newton_solve(space, system, params, linear_solver, tol=1e-9, max_iter=20,
                 bc_kind="SCREENED", linear=False, x0=None):
    """Damped inexact Newton iteration for the reaction potential.

    ``linear_solver(A, rhs, x0, rtol)`` must return (x, n_iterations) for the
    eliminated symmetric system A.  Convergence is declared when the residual
    norm falls below ``tol`` times the linear-model residual norm of the
    boundary-lifted zero state (the natural problem scale).  Inner solves use
    the forcing tolerance min(0.5, ||R||^(1/2)), which tightens near the
    solution.  Without a warm start, the nonlinear path starts from a linear
    predictor solve: sinh(u + u_c) at a zero reaction field is astronomically
    stiff near the interface, while the linear solution is already close.
    Returns (FieldVector, NewtonInfo).
    """
    g = boundary_potential(system, params, bc_kind)
    lift = lift_boundary(space, g)

    info = NewtonInfo()
    ref = np.linalg.norm(rpbe_residual(space, lift, system, params, linear=True))
    if ref == 0.0:
        return FieldVector(space, lift), info

    def solve_step(u_at, residual, rtol, use_linear_model):
        J = rpbe_jacobian(space, u_at, system, params, linear=use_linear_model)
        J, _ = apply_dirichlet(J, np.zeros(space.n_dofs), space, 0.0)
        step, its = linear_solver(J, residual, np.zeros(space.n_dofs), rtol)
        info.linear_iterations += its
        return step

    if x0 is not None:
        u = np.asarray(x0, dtype=np.float64).copy()
        u[space.boundary_dofs] = lift[space.boundary_dofs]
    elif linear:
        u = lift.copy()
    else:
        res_l = rpbe_residual(space, lift, system, params, linear=True)
        u = lift + solve_step(lift, res_l, 1e-6, use_linear_model=True)

    res = rpbe_residual(space, u, system, params, linear=linear)
    norm = np.linalg.norm(res)
    info.residual_history.append(norm)
    for _ in range(max_iter):
        if norm <= tol * ref:
            return FieldVector(space, u), info
        forcing = tol * ref / norm if linear else min(0.5, float(np.sqrt(norm)))
        step = solve_step(u, res, forcing, use_linear_model=linear)

        scale = 1.0
        for _ in range(10):
            trial = u + scale * step
            res_t = rpbe_residual(space, trial, system, params, linear=linear)
            norm_t = np.linalg.norm(res_t)
            if norm_t < norm:
                break
            scale *= 0.5
        else:
            log.warning("Newton damping exhausted (10 halvings); accepting step")
            trial = u + scale * step
            res_t = rpbe_residual(space, trial, system, params, linear=linear)
            norm_t = np.linalg.norm(res_t)
        u, res, norm = trial, res_t, norm_t
        info.iterations += 1
        info.residual_history.append(norm)

    if norm <= tol * ref:
        return FieldVector(space, u), info
    raise NewtonError(
        f"Newton did not converge in {max_iter} iterations "
        f"(relative residual {norm / ref:.3g})",
        info.residual_history,
    )
