"""Solvation free energy functional and the element error indicators.

Three indicators are provided: an energy-norm residual indicator, a
goal-oriented indicator weighted by a piecewise-quadratic dual solution,
and a goal-oriented indicator built from elementwise Neumann problems in
the edge-bubble space with a piecewise-linear dual.  The goal functional
is the solvation free energy, mollified by step kernels over small balls
around the charge centers so it is bounded on the solution space.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .fespace import (FESpace, FieldVector, PointLocationError, apply_dirichlet,
                      _locator, p2_values, p2_grad_coeffs)
from .mesh import SOLVENT, mesh_geometry, _EDGES, _FACES
from .problem import coulomb
from .quadrature import tet_rule, tri_rule

__all__ = [
    "GoalFunctional",
    "IndicatorField",
    "solvation_energy",
    "mollified_goal_vector",
    "mollified_goal_elements",
    "solve_dual",
    "indicator_energy",
    "indicator_goal_quadratic",
    "indicator_goal_linear",
    "goal_estimate_weak_residual",
]


def solvation_energy(u_r, system):
    """Polar solvation free energy (1/2) sum_i q_i u_r(x_i), in kB T."""
    try:
        vals = u_r.at(system.positions)
    except PointLocationError as exc:
        raise PointLocationError(f"atom center outside the mesh: {exc}") from None
    return 0.5 * float(system.charges @ np.atleast_1d(vals))


@dataclass
class GoalFunctional:
    """Mollified solvation energy: each delta source is replaced by the
    constant kernel 1/|B_sigma| on a ball of radius sigma around the atom."""

    system: object
    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.broadcast_to(
            np.asarray(self.sigma, dtype=np.float64), (self.system.n_atoms,)
        ).copy()
        if np.any(self.sigma <= 0.0):
            raise ValueError("mollification radii must be positive")

    @classmethod
    def with_default_sigma(cls, system, mesh):
        """Half the distance from each atom to the nearest interface vertex,
        capped at the atom radius."""
        geo = mesh_geometry(mesh)
        if geo.interface_faces.size:
            iverts = np.unique(geo.faces[geo.interface_faces])
            pts = mesh.vertices[iverts]
            d = np.linalg.norm(
                system.positions[:, None, :] - pts[None, :, :], axis=2
            ).min(axis=1)
            sigma = np.minimum(0.5 * d, system.radii)
        else:
            sigma = system.radii.copy()
        return cls(system, sigma)


def _ball_rule(center, sigma, nr=5, nmu=6, nphi=12):
    """Product quadrature over a ball; weights sum to the ball volume exactly."""
    t, wt = leggauss(nr)
    t = 0.5 * (t + 1.0)
    wt = 0.5 * wt * t ** 2 * sigma ** 3
    mu, wmu = leggauss(nmu)
    phi = 2.0 * np.pi * (np.arange(nphi) + 0.5) / nphi
    wphi = 2.0 * np.pi / nphi

    r = sigma * t
    s = np.sqrt(1.0 - mu ** 2)
    dirs = np.empty((nmu, nphi, 3))
    dirs[:, :, 0] = s[:, None] * np.cos(phi)[None, :]
    dirs[:, :, 1] = s[:, None] * np.sin(phi)[None, :]
    dirs[:, :, 2] = mu[:, None]
    pts = center[None, None, None, :] + r[:, None, None, None] * dirs[None, :, :, :]
    wts = wt[:, None, None] * wmu[None, :, None] * wphi
    return pts.reshape(-1, 3), np.broadcast_to(wts, (nr, nmu, nphi)).reshape(-1).copy()


def _mollified_contributions(space, goal):
    """Quadrature points of all mollifier balls with their weighted charges."""
    pts_all, coef_all = [], []
    for k in range(goal.system.n_atoms):
        sigma = goal.sigma[k]
        ball_vol = 4.0 / 3.0 * np.pi * sigma ** 3
        pts, wts = _ball_rule(goal.system.positions[k], sigma)
        pts_all.append(pts)
        coef_all.append(0.5 * goal.system.charges[k] / ball_vol * wts)
    return np.vstack(pts_all), np.concatenate(coef_all)


def _shape_values_at(space, bary):
    return bary if space.degree == 1 else p2_values(bary)


def mollified_goal_vector(space, goal):
    """Vector s with s_i the mollified solvation functional of basis i."""
    pts, coef = _mollified_contributions(space, goal)
    elem, bary = _locator(space.mesh).locate(pts)
    vals = _shape_values_at(space, bary)
    s = np.zeros(space.n_dofs)
    np.add.at(s, space.element_dofs[elem], coef[:, None] * vals)
    return s


def mollified_goal_elements(space, goal):
    """Per-element restriction of the mollified functional, as a map
    element id -> local dof vector (only elements meeting a ball appear)."""
    pts, coef = _mollified_contributions(space, goal)
    elem, bary = _locator(space.mesh).locate(pts)
    vals = coef[:, None] * _shape_values_at(space, bary)
    out = {}
    order = np.argsort(elem, kind="stable")
    bounds = np.searchsorted(elem[order], np.unique(elem))
    groups = np.split(order, bounds[1:])
    for g in groups:
        out[int(elem[g[0]])] = vals[g].sum(axis=0)
    return out


def solve_dual(space, params, s, linear_solver=None):
    """Solve the symmetric dual problem a(v, w) + (kappa^2 v, w) = s(v)
    with homogeneous Dirichlet data on the given space (degree 1 or 2)."""
    from .fespace import assemble_operator
    from .mlsolve import pcg

    A = assemble_operator(space, params.eps, params.kappa2)
    A, b = apply_dirichlet(A, np.asarray(s, dtype=np.float64).copy(), space, 0.0)
    if linear_solver is None:
        inv_diag = 1.0 / A.diagonal()

        def linear_solver(A_, b_, x0, rtol):
            x, its, _ = pcg(A_, b_, preconditioner=lambda r: inv_diag * r,
                            tol=rtol, max_iter=20000, x0=x0)
            return x, its

    w, _ = linear_solver(A, b, np.zeros(space.n_dofs), 1e-10)
    return FieldVector(space, w)


@dataclass
class IndicatorField:
    """Per-element indicator magnitudes plus, for goal indicators, the
    signed elementwise contributions whose sum is the global estimate."""

    kind: str
    values: np.ndarray
    signed: np.ndarray = None

    def marking_values(self):
        return self.values

    def global_estimate(self):
        """Signed goal-error estimate, or the energy root-sum-square."""
        if self.kind == "energy":
            return float(np.sqrt((self.values ** 2).sum()))
        return float(self.signed.sum())


def _p1_gradients(u_r):
    space = u_r.space
    return np.einsum("ek,ekx->ex", u_r.values[space.element_dofs], space.grad_lambda)


def _face_quad_points(mesh, faces):
    tb, _ = tri_rule()
    return np.einsum("qk,fkx->fqx", tb, mesh.vertices[faces])


def indicator_energy(u_r, system, params):
    """Residual indicator  eta_K^2 = h_K^2 ||r_K||_K^2 + (1/4) h_f ||r_f||_f^2.

    With elementwise-constant coefficients and a P1 solution the interior
    residual reduces to -kappa^2 (u_c + u_r) on solvent elements; the face
    term is the jump of the total flux (eps - eps_m) grad u_c + eps grad u_r
    over interior faces (boundary faces contribute nothing).
    """
    space = u_r.space
    if space.degree != 1:
        raise ValueError("the energy indicator expects a P1 primal solution")
    mesh = space.mesh
    geo = mesh_geometry(mesh)
    eta2 = np.zeros(mesh.n_tets)

    # interior residual, solvent elements only
    elems = np.where(mesh.labels == SOLVENT)[0]
    if elems.size:
        bary, w = tet_rule()
        pts = np.einsum("qk,ekx->eqx", bary, mesh.vertices[mesh.tets[elems]])
        uc, _ = coulomb(system, params, pts.reshape(-1, 3))
        uc = uc.reshape(pts.shape[:2])
        u_q = np.einsum("qk,ek->eq", bary, u_r.values[mesh.tets[elems]])
        r = params.kappa2[SOLVENT] * (uc + u_q)
        wts = 6.0 * space.volumes[elems, None] * w[None, :]
        eta2[elems] += geo.diameters[elems] ** 2 * np.einsum("eq,eq->e", wts, r ** 2)

    # face jumps
    interior = np.where(geo.face_elems[:, 1] >= 0)[0]
    if interior.size:
        left = geo.face_elems[interior, 0]
        right = geo.face_elems[interior, 1]
        n = geo.face_normals[interior]
        grads = _p1_gradients(u_r)
        eps_e = params.eps[mesh.labels]
        c0 = np.einsum("fx,fx->f", eps_e[left, None] * grads[left]
                       - eps_e[right, None] * grads[right], n)
        dcoef = eps_e[left] - eps_e[right]          # nonzero only across the interface

        tb, tw = tri_rule()
        jump_sq = np.full((interior.size, tw.size), 0.0)
        jump_sq[:] = c0[:, None] ** 2
        varying = np.where(dcoef != 0.0)[0]
        if varying.size:
            fpts = _face_quad_points(mesh, geo.faces[interior[varying]])
            _, guc = coulomb(system, params, fpts.reshape(-1, 3))
            guc_n = np.einsum("fqx,fx->fq", guc.reshape(fpts.shape), n[varying])
            jump_sq[varying] = (c0[varying, None] + dcoef[varying, None] * guc_n) ** 2
        I_f = 2.0 * geo.face_areas[interior] * np.einsum("q,fq->f", tw, jump_sq)
        contrib = 0.25 * geo.face_diameters[interior] * I_f
        np.add.at(eta2, left, contrib)
        np.add.at(eta2, right, contrib)

    return IndicatorField("energy", np.sqrt(eta2))


def _dual_increment(w2):
    """P2 coefficients of w2 minus its vertex-value P1 injection."""
    mesh = w2.space.mesh
    e = w2.values.copy()
    nv = mesh.n_vertices
    e[:nv] = 0.0
    edges = mesh.edges
    e[nv:] = w2.values[nv:] - 0.5 * (w2.values[edges[:, 0]] + w2.values[edges[:, 1]])
    return e


def indicator_goal_quadratic(u_r, w2, system, params):
    """Goal indicator weighted by the quadratic-dual increment w2 - I(w2).

    Per element, the signed contribution is the weak-residual integrand of
    the primal solution paired with the increment; the indicator magnitude
    integrates its absolute value.  I is nodal injection onto P1.
    """
    space = u_r.space
    if space.degree != 1 or w2.space.degree != 2:
        raise ValueError("expected a P1 primal and a P2 dual")
    if w2.space.mesh is not space.mesh:
        raise ValueError("primal and dual live on different meshes")
    mesh = space.mesh
    sp2 = w2.space

    bary, w = tet_rule()
    vals2 = p2_values(bary)
    B2 = p2_grad_coeffs(bary)
    ew = _dual_increment(w2)[sp2.element_dofs]
    ew_q = np.einsum("qk,ek->eq", vals2, ew)
    grad_ew = np.einsum("qki,eix,ek->eqx", B2, space.grad_lambda, ew)

    grads_u = _p1_gradients(u_r)
    u_q = np.einsum("qk,ek->eq", bary, u_r.values[mesh.tets])
    eps_e = params.eps[mesh.labels]
    kap_e = params.kappa2[mesh.labels]

    f = -np.einsum("e,ex,eqx->eq", eps_e, grads_u, grad_ew)
    f -= kap_e[:, None] * u_q * ew_q

    solvent = np.where(mesh.labels == SOLVENT)[0]
    if solvent.size:
        pts = np.einsum("qk,ekx->eqx", bary, mesh.vertices[mesh.tets[solvent]])
        uc, guc = coulomb(system, params, pts.reshape(-1, 3))
        uc = uc.reshape(pts.shape[:2])
        guc = guc.reshape(pts.shape)
        deps = eps_e[solvent] - params.eps_m
        f[solvent] -= np.einsum("e,eqx,eqx->eq", deps, guc, grad_ew[solvent])
        f[solvent] -= params.kappa2[SOLVENT] * uc * ew_q[solvent]

    wts = 6.0 * space.volumes[:, None] * w[None, :]
    signed = np.einsum("eq,eq->e", wts, f)
    values = np.einsum("eq,eq->e", wts, np.abs(f))
    return IndicatorField("goal_quadratic", values, signed)


def goal_estimate_weak_residual(u_r, w, system, params):
    """Weak residual of the primal solution paired with a dual field on the
    same P1 space.  Vanishes (to solver tolerance) when the primal is the
    discrete solution: the degeneracy that motivates the quadratic dual."""
    from .problem import rpbe_residual

    res = rpbe_residual(u_r.space, u_r, system, params, linear=True)
    return float(res @ w.values)


def _bubble_face_table():
    """Edge-bubble values at the surface rule points of each local face."""
    tb, _ = tri_rule()
    nq = tb.shape[0]
    table = np.zeros((4, nq, 6))
    for fi, fverts in enumerate(_FACES):
        lam = np.zeros((nq, 4))
        for c, lv in enumerate(fverts):
            lam[:, lv] = tb[:, c]
        for e, (i, j) in enumerate(_EDGES):
            table[fi, :, e] = 4.0 * lam[:, i] * lam[:, j]
    return table


_BUBBLE_FACE = _bubble_face_table()


def indicator_goal_linear(u_r, w1, goal, params, flux="average"):
    """Element-residual-method goal indicator with a P1 dual.

    On each element two Neumann problems are solved in the edge-bubble P2
    space: one loaded by the primal weak residual with flux data from the
    total-flux traces, one by the dual residual of w1 with its conormal
    traces.  ``flux`` selects averaged ('average') or own-side ('one_sided')
    traces on interior faces; boundary faces always use the own trace.
    The indicator is the parallelogram-law pairing of the two local error
    fields in the element energy norm; marking consumes its magnitude.
    """
    space = u_r.space
    if space.degree != 1 or w1.space.degree != 1:
        raise ValueError("expected P1 primal and P1 dual")
    if w1.space.mesh is not space.mesh:
        raise ValueError("primal and dual live on different meshes")
    if flux not in ("average", "one_sided"):
        raise ValueError(f"unknown flux convention {flux!r}")
    system = goal.system
    mesh = space.mesh
    geo = mesh_geometry(mesh)
    n_tets = mesh.n_tets
    eps_e = params.eps[mesh.labels]
    kap_e = params.kappa2[mesh.labels]
    vols = space.volumes

    # element energy matrices in the bubble block of the P2 local matrices
    bary, w = tet_rule()
    vals2 = p2_values(bary)
    B2 = p2_grad_coeffs(bary)
    g = space.grad_lambda
    C = np.einsum("eik,ejk->eij", g, g)
    stiff = np.einsum("q,qki,eij,qlj->ekl", w, B2, C, B2) * (6.0 * vols * eps_e)[:, None, None]
    mass_ref = np.einsum("q,qk,ql->kl", w, vals2, vals2)
    loc = stiff + (6.0 * vols * kap_e)[:, None, None] * mass_ref
    M = loc[:, 4:, 4:]
    M = 0.5 * (M + M.transpose(0, 2, 1))

    # volume parts of the local loads
    grads_u = _p1_gradients(u_r)
    grads_w = _p1_gradients(w1)
    grad_b = np.einsum("qki,eix->eqkx", B2[:, 4:, :], g)      # bubble gradients
    int_grad_b = np.einsum("q,eqkx->ekx", w, grad_b) * (6.0 * vols)[:, None, None]
    rhs_u = -np.einsum("e,ex,ekx->ek", eps_e, grads_u, int_grad_b)
    rhs_w = -np.einsum("e,ex,ekx->ek", eps_e, grads_w, int_grad_b)

    wts = 6.0 * vols[:, None] * w[None, :]
    b_q = vals2[:, 4:]
    u_q = np.einsum("qk,ek->eq", bary, u_r.values[mesh.tets])
    w_q = np.einsum("qk,ek->eq", bary, w1.values[mesh.tets])
    rhs_u -= np.einsum("eq,eq,qk->ek", wts, kap_e[:, None] * u_q, b_q)
    rhs_w -= np.einsum("eq,eq,qk->ek", wts, kap_e[:, None] * w_q, b_q)

    solvent = np.where(mesh.labels == SOLVENT)[0]
    if solvent.size:
        pts = np.einsum("qk,ekx->eqx", bary, mesh.vertices[mesh.tets[solvent]])
        uc, guc = coulomb(system, params, pts.reshape(-1, 3))
        uc = uc.reshape(pts.shape[:2])
        guc = guc.reshape(pts.shape)
        deps = params.eps[SOLVENT] - params.eps_m
        rhs_u[solvent] -= deps * np.einsum("eqx,eqkx->ek", guc, grad_b[solvent])
        rhs_u[solvent] -= params.kappa2[SOLVENT] * np.einsum(
            "eq,eq,qk->ek", wts[solvent], uc, b_q)

    # dual volume load: mollified functional restricted to elements
    sp2 = FESpace(mesh, 2)
    for elem, vec in mollified_goal_elements(sp2, goal).items():
        rhs_w[elem] += vec[4:]

    # face flux terms
    tb, tw = tri_rule()
    face_verts = mesh.vertices[mesh.tets][:, np.array(_FACES)]  # (e, 4, 3 verts, 3)
    fpts = np.einsum("qk,efkx->efqx", tb, face_verts)
    fid = geo.elem_face_ids
    n_out = geo.face_normals[fid]
    own_is_left = geo.face_elems[fid, 0] == np.arange(n_tets)[:, None]
    n_out = np.where(own_is_left[:, :, None], n_out, -n_out)
    neighbor = geo.face_elems[fid, 0] + geo.face_elems[fid, 1] \
        - np.arange(n_tets)[:, None]          # -1 - self on boundary faces
    has_nb = geo.face_elems[fid, 1] >= 0
    nb = np.where(has_nb, neighbor, np.arange(n_tets)[:, None])

    # conormal traces of the P1 fields (constant per side)
    flux_u_own = np.einsum("ex,efx->ef", eps_e[:, None] * grads_u, n_out)
    flux_u_nb = np.einsum("efx,efx->ef", eps_e[nb][:, :, None] * grads_u[nb], n_out)
    flux_w_own = np.einsum("ex,efx->ef", eps_e[:, None] * grads_w, n_out)
    flux_w_nb = np.einsum("efx,efx->ef", eps_e[nb][:, :, None] * grads_w[nb], n_out)

    # Coulomb part of the total flux, varying over the face
    deps_own = np.broadcast_to((eps_e - params.eps_m)[:, None], fid.shape)
    deps_nb = eps_e[nb] - params.eps_m
    need_uc = (deps_own != 0.0) | (deps_nb != 0.0)
    guc_n = np.zeros(fid.shape + (tw.size,))
    sel = np.where(need_uc)
    if sel[0].size:
        _, guc = coulomb(system, params, fpts[sel].reshape(-1, 3))
        guc = guc.reshape(sel[0].size, tw.size, 3)
        guc_n[sel] = np.einsum("fqx,fx->fq", guc, n_out[sel])

    fu = flux_u_own[:, :, None] + deps_own[:, :, None] * guc_n
    fw = flux_w_own[:, :, None] + np.zeros_like(guc_n)
    if flux == "average":
        fu_nb = flux_u_nb[:, :, None] + deps_nb[:, :, None] * guc_n
        fw_nb = flux_w_nb[:, :, None] + np.zeros_like(guc_n)
        fu = np.where(has_nb[:, :, None], 0.5 * (fu + fu_nb), fu)
        fw = np.where(has_nb[:, :, None], 0.5 * (fw + fw_nb), fw)

    scale = 2.0 * geo.face_areas[fid]         # surface rule weights sum to 1/2
    rhs_u += np.einsum("ef,efq,q,fqk->ek", scale, fu, tw, _BUBBLE_FACE)
    rhs_w += np.einsum("ef,efq,q,fqk->ek", scale, fw, tw, _BUBBLE_FACE)

    try:
        phi = np.linalg.solve(M, rhs_u[:, :, None])[:, :, 0]
        psi = np.linalg.solve(M, rhs_w[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular local element problem: {exc}") from None

    plus = phi + psi
    minus = phi - psi
    eta = 0.25 * (np.einsum("ek,ekl,el->e", plus, M, plus)
                  - np.einsum("ek,ekl,el->e", minus, M, minus))
    return IndicatorField("goal_linear", np.abs(eta), eta)
