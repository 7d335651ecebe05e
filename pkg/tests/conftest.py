import numpy as np
import pytest

from pbsolve.mesh import SOLUTE, SOLVENT, SimplicialMesh, MeshHierarchy


@pytest.fixture
def reference_tet():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return SimplicialMesh(v, [[0, 1, 2, 3]], [SOLUTE])


@pytest.fixture
def two_tets():
    """Two tetrahedra sharing the face (0,1,2); the longest edge of both is
    the shared edge (0,1) of length 3."""
    v = np.array([
        [0.0, 0.0, 0.0],
        [3.0, 0.0, 0.0],
        [1.5, 1.0, 0.0],
        [1.5, 0.4, 0.8],
        [1.5, 0.4, -0.8],
    ])
    t = np.array([[0, 1, 2, 3], [0, 2, 1, 4]])
    return SimplicialMesh(v, t, [SOLUTE, SOLVENT])


def cube_mesh(n=1, half_width=1.0, label=SOLUTE):
    """n^3 subcubes split into 6 tets each (conforming)."""
    from pbsolve.cli import generate_born_mesh

    mesh = generate_born_mesh(half_width, half_width * 0.5, max(n, 2))
    labels = np.full(mesh.n_tets, label, dtype=np.int8)
    return SimplicialMesh(mesh.vertices, mesh.tets, labels)


@pytest.fixture
def cube6():
    """Unit-ish cube split into 6 tetrahedra (one subcube)."""
    v = np.array([
        [0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
        [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1],
    ], dtype=float)

    def vid(i, j, k):
        return i * 4 + j * 2 + k

    paths = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for p in paths:
        c = [np.zeros(3, dtype=int)]
        for axis in p:
            nxt = c[-1].copy()
            nxt[axis] += 1
            c.append(nxt)
        tets.append([vid(*x) for x in c])
    tets = np.array(tets)
    pts = v[tets]
    vols = np.linalg.det(pts[:, 1:] - pts[:, :1])
    tets[vols < 0] = tets[vols < 0][:, [0, 2, 1, 3]]
    labels = np.array([SOLUTE] * 3 + [SOLVENT] * 3, dtype=np.int8)
    return SimplicialMesh(v, tets, labels)


def check_conforming(mesh):
    """Independent conformity oracle: face incidence counts plus a scan for
    vertices sitting at edge midpoints of elements that do not contain them."""
    from pbsolve.mesh import _EDGES, _face_key

    faces = mesh.tets[:, [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]]].reshape(-1, 3)
    key = _face_key(faces)
    _, counts = np.unique(key, return_counts=True)
    assert counts.max() <= 2, "face shared by more than two tets"

    pos = {tuple(np.round(p, 9)): i for i, p in enumerate(mesh.vertices)}
    for t, tet in enumerate(mesh.tets):
        for i, j in _EDGES:
            mid = 0.5 * (mesh.vertices[tet[i]] + mesh.vertices[tet[j]])
            hit = pos.get(tuple(np.round(mid, 9)))
            if hit is not None and hit not in tet:
                raise AssertionError(
                    f"hanging node {hit} on edge ({tet[i]},{tet[j]}) of element {t}"
                )
