"""P1/P2 Lagrange spaces on tetrahedral meshes: assembly, transfer, evaluation.

All operators are scipy CSR matrices.  Element contributions are accumulated
in ascending element order, so repeated assembly of the same mesh is
bit-for-bit reproducible.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import _EDGES, SOLUTE, SOLVENT  # noqa: F401  (labels re-exported for callers)
from .quadrature import tet_rule

__all__ = [
    "FESpace",
    "FieldVector",
    "PointLocationError",
    "assemble_operator",
    "prolongation",
    "apply_dirichlet",
    "evaluate",
    "lift_boundary",
]


class PointLocationError(ValueError):
    """A query point could not be located inside the mesh."""


def p2_values(bary):
    """P2 shape functions at barycentric points, shape (nq, 10).

    Dofs 0..3 are vertex functions, 4..9 edge functions in the order of
    the local edge table (0,1),(0,2),(0,3),(1,2),(1,3),(2,3).
    """
    lam = np.asarray(bary)
    out = np.empty(lam.shape[:-1] + (10,))
    out[..., :4] = lam * (2.0 * lam - 1.0)
    for e, (i, j) in enumerate(_EDGES):
        out[..., 4 + e] = 4.0 * lam[..., i] * lam[..., j]
    return out


def p2_grad_coeffs(bary):
    """Coefficients B with grad(phi_k)(x_q) = sum_i B[q,k,i] grad(lambda_i)."""
    lam = np.asarray(bary)
    nq = lam.shape[0]
    B = np.zeros((nq, 10, 4))
    for k in range(4):
        B[:, k, k] = 4.0 * lam[:, k] - 1.0
    for e, (i, j) in enumerate(_EDGES):
        B[:, 4 + e, i] = 4.0 * lam[:, j]
        B[:, 4 + e, j] = 4.0 * lam[:, i]
    return B


def p1_grad_coeffs(bary):
    lam = np.asarray(bary)
    return np.broadcast_to(np.eye(4), (lam.shape[0], 4, 4)).copy()


@dataclass(eq=False)
class FESpace:
    """Lagrange finite element space of degree 1 or 2 on one mesh."""

    mesh: object
    degree: int = 1

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")

    @property
    def n_dofs(self):
        if self.degree == 1:
            return self.mesh.n_vertices
        return self.mesh.n_vertices + self.mesh.edges.shape[0]

    @cached_property
    def _edge_keys(self):
        e = self.mesh.edges
        return (e[:, 0].astype(np.int64) << 32) | e[:, 1].astype(np.int64)

    def _edge_ids(self, pairs):
        """Global edge index of sorted vertex pairs (..., 2)."""
        p = np.sort(pairs, axis=-1)
        key = (p[..., 0].astype(np.int64) << 32) | p[..., 1].astype(np.int64)
        idx = np.searchsorted(self._edge_keys, key)
        if np.any(self._edge_keys[idx] != key):
            raise ValueError("edge pair not present in the mesh")
        return idx

    @cached_property
    def element_dofs(self):
        tets = self.mesh.tets
        if self.degree == 1:
            return tets
        eids = self._edge_ids(tets[:, _EDGES])
        return np.hstack([tets, self.mesh.n_vertices + eids])

    @cached_property
    def dof_points(self):
        v = self.mesh.vertices
        if self.degree == 1:
            return v
        e = self.mesh.edges
        return np.vstack([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])

    @cached_property
    def boundary_dofs(self):
        bf = self.mesh.boundary_faces
        dofs = np.unique(bf)
        if self.degree == 2:
            pairs = np.vstack([bf[:, [0, 1]], bf[:, [0, 2]], bf[:, [1, 2]]])
            edofs = self.mesh.n_vertices + np.unique(self._edge_ids(pairs))
            dofs = np.concatenate([dofs, edofs])
        return dofs

    @cached_property
    def interior_mask(self):
        m = np.ones(self.n_dofs, dtype=bool)
        m[self.boundary_dofs] = False
        return m

    @cached_property
    def grad_lambda(self):
        """Barycentric gradients, shape (n_tets, 4, 3)."""
        p = self.mesh.vertices[self.mesh.tets]
        J = p[:, 1:] - p[:, :1]                 # rows are edge vectors from v0
        Jinv = np.linalg.inv(J)                 # columns give grad(lambda_{1..3})
        g = np.empty((self.mesh.n_tets, 4, 3))
        g[:, 1:] = Jinv.transpose(0, 2, 1)
        g[:, 0] = -g[:, 1:].sum(axis=1)
        return g

    @cached_property
    def volumes(self):
        p = self.mesh.vertices[self.mesh.tets]
        return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0

    def quad_points(self):
        """Physical quadrature points, shape (n_tets, nq, 3)."""
        bary, _ = tet_rule()
        return np.einsum("qk,ekx->eqx", bary, self.mesh.vertices[self.mesh.tets])

    def shape_tables(self):
        """Values (nq, nd) and gradient coefficients (nq, nd, 4) at the rule."""
        bary, _ = tet_rule()
        if self.degree == 1:
            return bary.copy(), p1_grad_coeffs(bary)
        return p2_values(bary), p2_grad_coeffs(bary)


@dataclass(eq=False)
class FieldVector:
    """Coefficient vector of a finite element field (dimensionless potential)."""

    space: FESpace
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.space.n_dofs,):
            raise ValueError(
                f"coefficient vector has length {self.values.shape}, "
                f"space has {self.space.n_dofs} dofs"
            )

    def at(self, points):
        return evaluate(self, points)


def assemble_operator(space, eps, kappa2):
    """Assemble  A_ij = (eps grad phi_j, grad phi_i) + (kappa2 phi_j, phi_i)
    with region-wise constant coefficients indexed by element label."""
    mesh = space.mesh
    eps = np.asarray(eps, dtype=np.float64)
    kappa2 = np.asarray(kappa2, dtype=np.float64)
    if np.any(eps <= 0.0):
        raise ValueError(f"dielectric must be positive, got {eps}")
    if np.any(kappa2 < 0.0):
        raise ValueError(f"ionic coefficient must be nonnegative, got {kappa2}")
    eps_e = eps[mesh.labels]
    kap_e = kappa2[mesh.labels]

    bary, w = tet_rule()
    vals, B = space.shape_tables()
    vols = space.volumes
    g = space.grad_lambda

    C = np.einsum("eik,ejk->eij", g, g)                       # grad(lam) Gram matrices
    stiff = np.einsum("q,qki,eij,qlj->ekl", w, B, C, B)
    stiff *= (6.0 * vols * eps_e)[:, None, None]
    mass_ref = np.einsum("q,qk,ql->kl", w, vals, vals)
    A_e = stiff + (6.0 * vols * kap_e)[:, None, None] * mass_ref
    A_e = 0.5 * (A_e + A_e.transpose(0, 2, 1))                # exact symmetry

    A = scatter_element_matrices(space, A_e)
    # duplicate summation order after the index sort is not symmetric, so
    # enforce A = A^T exactly
    return (0.5 * (A + A.T)).tocsr()


def scatter_element_matrices(space, A_e):
    """Accumulate per-element dense matrices into a global CSR operator."""
    dofs = space.element_dofs
    nd = dofs.shape[1]
    rows = np.repeat(dofs, nd, axis=1).ravel()
    cols = np.tile(dofs, (1, nd)).ravel()
    A = sp.coo_matrix((A_e.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs))
    return A.tocsr()


def prolongation(hierarchy, level):
    """P1 interpolation matrix from level-1 nodes to level nodes.

    Rows of previously existing nodes are identity rows; a node created as
    the midpoint of edge (a, b) averages the rows of a and b, which reduces
    to entries (1/2, 1/2) when both endpoints are coarse nodes.
    """
    if not 1 <= level < hierarchy.n_levels:
        raise ValueError(f"prolongation exists for levels 1..{hierarchy.n_levels - 1}")
    n_prev = hierarchy.meshes[level - 1].n_vertices
    n_cur = hierarchy.meshes[level].n_vertices

    rows = list(range(n_prev))
    cols = list(range(n_prev))
    data = [1.0] * n_prev
    new_rows = {}
    for m, (a, b) in zip(hierarchy.fine_nodes[level], hierarchy.parent_edges[level]):
        r = {}
        for parent in (int(a), int(b)):
            if parent < n_prev:
                r[parent] = r.get(parent, 0.0) + 0.5
            else:
                for c, v in new_rows[parent].items():
                    r[c] = r.get(c, 0.0) + 0.5 * v
        new_rows[int(m)] = r
        for c in sorted(r):
            rows.append(int(m))
            cols.append(c)
            data.append(r[c])
    P = sp.coo_matrix((data, (rows, cols)), shape=(n_cur, n_prev))
    return P.tocsr()


def _boundary_values(space, g):
    pts = space.dof_points[space.boundary_dofs]
    if callable(g):
        gv = np.asarray(g(pts), dtype=np.float64)
    else:
        gv = np.broadcast_to(np.asarray(g, dtype=np.float64), (pts.shape[0],)).copy()
    if gv.shape != (pts.shape[0],):
        raise ValueError("boundary data has wrong shape")
    return gv


def lift_boundary(space, g):
    """Vector that carries g on the boundary dofs and 0 elsewhere."""
    x = np.zeros(space.n_dofs)
    x[space.boundary_dofs] = _boundary_values(space, g)
    return x


def apply_dirichlet(A, b, space, g=0.0):
    """Eliminate Dirichlet rows/columns symmetrically.

    Returns (A', b') where A' keeps unit diagonal entries on the boundary
    dofs and b' carries the lifted boundary data, so the solution of
    A' x = b' satisfies x = g on the boundary.
    """
    lift = lift_boundary(space, g)
    b2 = b - A @ lift
    b2[space.boundary_dofs] = lift[space.boundary_dofs]
    mask = space.interior_mask.astype(np.float64)
    D = sp.diags(mask)
    A2 = (D @ A @ D + sp.diags(1.0 - mask)).tocsr()
    A2.sum_duplicates()
    return A2, b2


class CellLocator:
    """Locate points in a tetrahedral mesh via a centroid tree plus
    barycentric containment tests."""

    def __init__(self, mesh, tol=1e-10):
        self.mesh = mesh
        self.tol = tol
        p = mesh.vertices[mesh.tets]
        self.origin = p[:, 0]
        self.Jinv = np.linalg.inv(p[:, 1:] - p[:, :1])
        self.tree = cKDTree(p.mean(axis=1))

    def barycentric(self, elems, points):
        loc = np.einsum("eij,ej->ei", self.Jinv[elems].transpose(0, 2, 1),
                        points - self.origin[elems])
        lam0 = 1.0 - loc.sum(axis=1)
        return np.column_stack([lam0, loc])

    def locate(self, points):
        """Element id and barycentric coordinates for each point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        elem = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 4))
        open_ = np.arange(n)
        k_max = min(64, self.mesh.n_tets)
        k = 4
        while open_.size and k <= k_max:
            _, cand = self.tree.query(points[open_], k=min(k, self.mesh.n_tets))
            cand = np.atleast_2d(cand)
            for col in range(cand.shape[1]):
                if not open_.size:
                    break
                lam = self.barycentric(cand[:, col], points[open_])
                ok = lam.min(axis=1) >= -self.tol
                hit = open_[ok]
                elem[hit] = cand[ok, col]
                bary[hit] = lam[ok]
                open_ = open_[~ok]
                cand = cand[~ok]
            k *= 4
        for i in open_:  # rare fallback: exhaustive scan
            lam = self.barycentric(np.arange(self.mesh.n_tets),
                                   np.broadcast_to(points[i], (self.mesh.n_tets, 3)))
            cand = np.where(lam.min(axis=1) >= -self.tol)[0]
            if cand.size == 0:
                raise PointLocationError(f"point {points[i]} is outside the mesh")
            elem[i] = cand[0]
            bary[i] = lam[cand[0]]
        return elem, bary


def _locator(mesh):
    loc = getattr(mesh, "_cell_locator", None)
    if loc is None:
        loc = CellLocator(mesh)
        mesh._cell_locator = loc
    return loc


def evaluate(u, points):
    """Evaluate a finite element field at physical points."""
    space = u.space
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    elem, bary = _locator(space.mesh).locate(points)
    if space.degree == 1:
        vals = bary
    else:
        vals = p2_values(bary)
    out = np.einsum("pk,pk->p", vals, u.values[space.element_dofs[elem]])
    return out[0] if single else out
