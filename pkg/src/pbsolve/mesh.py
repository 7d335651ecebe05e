"""Hierarchical conforming tetrahedral meshes refined by longest-edge bisection.

The domain is split into a solute region and a solvent region; the interface
between them is resolved by the mesh and region labels are inherited under
refinement.  A :class:`MeshHierarchy` records, for every level, which nodes
and elements were created there, which is what the multilevel smoothing-set
variants (HB, BPX, BEK, ONERING) are built from.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "SOLUTE",
    "SOLVENT",
    "SimplicialMesh",
    "MeshHierarchy",
    "MeshGeometry",
    "bisect_refine",
    "smoothing_set",
    "mesh_geometry",
    "boundary_faces_of",
    "read_mesh",
    "write_mesh",
]

SOLUTE = 0
SOLVENT = 1

# local edges of a tetrahedron, as index pairs into its vertex list
_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# local face k is opposite local vertex k
_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0


def _face_key(faces):
    """Encode sorted vertex triples as a single int64 per face."""
    f = np.sort(faces, axis=1).astype(np.int64)
    return (f[:, 0] << 42) | (f[:, 1] << 21) | f[:, 2]


def boundary_faces_of(tets):
    """Faces incident to exactly one tetrahedron, as vertex triples."""
    faces = tets[:, _FACES].reshape(-1, 3)
    key = _face_key(faces)
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    uniq, start, count = np.unique(key_s, return_index=True, return_counts=True)
    if count.max(initial=1) > 2:
        raise MeshError("a face is shared by more than two tetrahedra")
    single = start[count == 1]
    return np.sort(faces[order[single]], axis=1)


@dataclass(eq=False)
class SimplicialMesh:
    """Conforming tetrahedral mesh with solute/solvent region labels.

    vertices       : (n_vertices, 3) float coordinates (Angstrom)
    tets           : (n_tets, 4) vertex ids, positively oriented
    labels         : (n_tets,) SOLUTE or SOLVENT
    boundary_faces : (n_bfaces, 3) sorted vertex triples on the domain boundary
    """

    vertices: np.ndarray
    tets: np.ndarray
    labels: np.ndarray
    boundary_faces: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        if self.boundary_faces is None:
            self.boundary_faces = boundary_faces_of(self.tets)
        else:
            self.boundary_faces = np.ascontiguousarray(self.boundary_faces, dtype=np.int64)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    @cached_property
    def edges(self):
        """Unique sorted vertex pairs, lexicographically ordered."""
        e = self.tets[:, _EDGES].reshape(-1, 2)
        e = np.sort(e, axis=1)
        key = (e[:, 0].astype(np.int64) << 32) | e[:, 1].astype(np.int64)
        _, idx = np.unique(key, return_index=True)
        return e[idx]

    @cached_property
    def boundary_vertices(self):
        return np.unique(self.boundary_faces)

    def validate(self):
        """Check conformity, orientation, and label invariants."""
        if self.tets.min(initial=0) < 0 or self.tets.max(initial=-1) >= self.n_vertices:
            raise MeshError("tetrahedron references a vertex that does not exist")
        vols = _signed_volumes(self.vertices, self.tets)
        bad = np.where(vols <= 0.0)[0]
        if bad.size:
            raise MeshError(f"element {bad[0]} has non-positive volume {vols[bad[0]]:g}")
        bf = boundary_faces_of(self.tets)
        if bf.shape != self.boundary_faces.shape or not np.array_equal(
            _face_key(bf), np.sort(_face_key(self.boundary_faces))
        ):
            raise MeshError("stored boundary faces disagree with face incidence counts")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")


@dataclass
class MeshGeometry:
    """Derived metric data of one mesh.

    Faces are unique sorted vertex triples; ``face_elems[f] = (left, right)``
    with ``right == -1`` on the boundary, and ``face_normals[f]`` is the unit
    normal pointing out of the left element.
    """

    diameters: np.ndarray       # (n_tets,) longest edge per element
    volumes: np.ndarray         # (n_tets,)
    faces: np.ndarray           # (n_faces, 3)
    face_elems: np.ndarray      # (n_faces, 2)
    face_areas: np.ndarray      # (n_faces,)
    face_normals: np.ndarray    # (n_faces, 3) outward w.r.t. left element
    face_diameters: np.ndarray  # (n_faces,) longest edge per face
    interface_faces: np.ndarray  # face ids separating SOLUTE from SOLVENT
    elem_face_ids: np.ndarray   # (n_tets, 4) face id of each local face


def mesh_geometry(mesh):
    """Element diameters/volumes, face areas/normals/adjacency, interface faces."""
    v = mesh.vertices
    tets = mesh.tets
    vols = _signed_volumes(v, tets)
    bad = np.where(vols <= 1e-300)[0]
    if bad.size:
        raise MeshError(f"element {bad[0]} is degenerate (volume {vols[bad[0]]:g})")

    p = v[tets]
    diam2 = np.zeros(mesh.n_tets)
    for i, j in _EDGES:
        d = p[:, i] - p[:, j]
        diam2 = np.maximum(diam2, np.einsum("ij,ij->i", d, d))
    diameters = np.sqrt(diam2)

    all_faces = tets[:, _FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(mesh.n_tets), 4)
    key = _face_key(all_faces)
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    uniq_key, start, count = np.unique(key_s, return_index=True, return_counts=True)
    if count.max(initial=1) > 2:
        raise MeshError("a face is shared by more than two tetrahedra")

    first = order[start]
    faces_oriented = all_faces[first]          # oriented outward w.r.t. left element
    left = owner[first]
    right = np.full(uniq_key.shape[0], -1, dtype=np.int64)
    two = count == 2
    right[two] = owner[order[start[two] + 1]]

    a = v[faces_oriented[:, 0]]
    cr = np.cross(v[faces_oriented[:, 1]] - a, v[faces_oriented[:, 2]] - a)
    nrm = np.linalg.norm(cr, axis=1)
    face_areas = 0.5 * nrm
    face_normals = cr / nrm[:, None]

    e01 = np.linalg.norm(v[faces_oriented[:, 1]] - a, axis=1)
    e02 = np.linalg.norm(v[faces_oriented[:, 2]] - a, axis=1)
    e12 = np.linalg.norm(v[faces_oriented[:, 2]] - v[faces_oriented[:, 1]], axis=1)
    face_diameters = np.maximum(np.maximum(e01, e02), e12)

    interior = right >= 0
    lab_left = mesh.labels[left]
    lab_right = np.where(interior, mesh.labels[np.where(interior, right, 0)], lab_left)
    iface = np.where(lab_left != lab_right)[0]

    # unique-face id of every element's local faces
    inv = np.empty(key.shape[0], dtype=np.int64)
    inv[order] = np.repeat(np.arange(uniq_key.shape[0]), count)
    elem_face_ids = inv.reshape(mesh.n_tets, 4)

    return MeshGeometry(
        diameters=diameters,
        volumes=vols,
        faces=np.sort(faces_oriented, axis=1),
        face_elems=np.column_stack([left, right]),
        face_areas=face_areas,
        face_normals=face_normals,
        face_diameters=face_diameters,
        interface_faces=iface,
        elem_face_ids=elem_face_ids,
    )


class MeshHierarchy:
    """Nested sequence of meshes produced by longest-edge bisection.

    Node ids are append-only: level ``j`` reuses all node ids of level
    ``j - 1`` and adds the nodes created by bisection.  Per level the
    hierarchy records the fine nodes, the parent edge of each fine node,
    the elements created at that level (refinement region, closure
    included), and the elements descended from the marked set.
    """

    def __init__(self, mesh):
        mesh.validate()
        self.meshes = [mesh]
        self.fine_nodes = [np.arange(mesh.n_vertices, dtype=np.int64)]
        self.parent_edges = [np.zeros((0, 2), dtype=np.int64)]
        self.new_elements = [np.arange(mesh.n_tets, dtype=np.int64)]
        self.marked_region = [np.arange(mesh.n_tets, dtype=np.int64)]
        self.marked_input = [np.zeros(0, dtype=np.int64)]

    @property
    def n_levels(self):
        return len(self.meshes)

    @property
    def finest(self):
        return self.meshes[-1]

    def node_counts(self):
        return [m.n_vertices for m in self.meshes]


def _longest_edge(tet, coords):
    """Vertex-id pair of the longest edge; ties break toward the
    lexicographically smallest sorted id pair."""
    best_len = -1.0
    best_key = None
    for i, j in _EDGES:
        a, b = tet[i], tet[j]
        key = (a, b) if a < b else (b, a)
        d = coords(a) - coords(b)
        length = float(d @ d)
        if length > best_len or (length == best_len and key < best_key):
            best_len = length
            best_key = key
    return best_key


def bisect_refine(hierarchy, marked, relabel=None):
    """Append one level to the hierarchy by bisecting the marked elements.

    Every marked element is bisected at its longest edge; neighbors are
    bisected recursively (again at their own longest edges) until the mesh
    is conforming.  Children inherit the parent's region label unless a
    ``relabel(centroids) -> labels`` rule is given; generator-defined
    geometries (the Born sphere) pass their labeling rule here so the
    discrete interface sharpens as the mesh is refined.
    """
    mesh = hierarchy.finest
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size == 0:
        raise ValueError("nothing to refine: the marked element set is empty")
    if marked[0] < 0 or marked[-1] >= mesh.n_tets:
        raise ValueError(f"marked element id out of range 0..{mesh.n_tets - 1}")

    n_old = mesh.n_vertices
    state = _RefineState(mesh)
    for t in marked:
        state.in_marked[t] = True

    queue = marked
    while queue.size:
        for t in queue:
            if state.alive[t]:
                state.bisect(t)
        queue = state.hanging_elements()

    new_mesh, created, descended, parent_pairs = state.finish()
    if relabel is not None and created.size:
        cents = new_mesh.vertices[new_mesh.tets[created]].mean(axis=1)
        new_mesh.labels[created] = np.asarray(relabel(cents), dtype=np.int8)
    hierarchy.meshes.append(new_mesh)
    hierarchy.fine_nodes.append(
        np.arange(n_old, new_mesh.n_vertices, dtype=np.int64)
    )
    hierarchy.parent_edges.append(parent_pairs)
    hierarchy.new_elements.append(created)
    hierarchy.marked_region.append(descended)
    hierarchy.marked_input.append(marked)
    return hierarchy


class _RefineState:
    """Array-backed working storage for one refine call."""

    def __init__(self, mesh):
        n = mesh.n_tets
        cap = 4 * n
        self.tets = np.empty((cap, 4), dtype=np.int64)
        self.tets[:n] = mesh.tets
        self.labels = np.empty(cap, dtype=np.int8)
        self.labels[:n] = mesh.labels
        self.alive = np.zeros(cap, dtype=bool)
        self.alive[:n] = True
        self.is_new = np.zeros(cap, dtype=bool)
        self.in_marked = np.zeros(cap, dtype=bool)
        self.n_work = n

        self.n_old = mesh.n_vertices
        vcap = 2 * self.n_old
        self.coords = np.empty((vcap, 3), dtype=np.float64)
        self.coords[: self.n_old] = mesh.vertices
        self.n_verts = self.n_old
        self.midpoint = {}
        self.mid_keys = []
        self.parent_pairs = []

    def _grow_tets(self):
        cap = 2 * self.tets.shape[0]
        for name in ("tets", "labels", "alive", "is_new", "in_marked"):
            arr = getattr(self, name)
            new = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
            new[: arr.shape[0]] = arr
            setattr(self, name, new)

    def _mid_node(self, a, b):
        key = (a, b) if a < b else (b, a)
        m = self.midpoint.get(key)
        if m is None:
            if self.n_verts == self.coords.shape[0]:
                new = np.empty((2 * self.n_verts, 3))
                new[: self.n_verts] = self.coords
                self.coords = new
            m = self.n_verts
            self.coords[m] = 0.5 * (self.coords[key[0]] + self.coords[key[1]])
            self.n_verts += 1
            self.midpoint[key] = m
            self.mid_keys.append((key[0] << 32) | key[1])
            self.parent_pairs.append(key)
        return m

    def bisect(self, t):
        tet = self.tets[t].copy()
        a, b = _longest_edge(tet, self.coords.__getitem__)
        m = self._mid_node(a, b)
        while self.n_work + 2 > self.tets.shape[0]:
            self._grow_tets()
        self.alive[t] = False
        for old in (b, a):
            k = self.n_work
            child = self.tets[k]
            child[:] = tet
            child[child == old] = m
            self.labels[k] = self.labels[t]
            self.alive[k] = True
            self.is_new[k] = True
            self.in_marked[k] = self.in_marked[t]
            self.n_work += 1

    def hanging_elements(self):
        """Live elements with a registered midpoint on one of their edges."""
        live = np.where(self.alive[: self.n_work])[0]
        e = np.sort(self.tets[live][:, _EDGES], axis=2)
        ekey = (e[:, :, 0] << 32) | e[:, :, 1]
        mkeys = np.fromiter(self.mid_keys, dtype=np.int64, count=len(self.mid_keys))
        hanging = np.isin(ekey, mkeys).any(axis=1)
        return live[hanging]

    def finish(self):
        keep = np.where(self.alive[: self.n_work])[0]
        new_mesh = SimplicialMesh(
            self.coords[: self.n_verts].copy(),
            self.tets[keep],
            self.labels[keep],
        )
        created = np.where(self.is_new[keep])[0].astype(np.int64)
        descended = np.where(self.in_marked[keep])[0].astype(np.int64)
        pairs = np.array(self.parent_pairs, dtype=np.int64).reshape(-1, 2)
        return new_mesh, created, descended, pairs


def smoothing_set(hierarchy, level, variant):
    """Node set smoothed on ``level`` by the given preconditioner variant.

    HB      : nodes first appearing at this level.
    BPX     : nodes whose P1 basis support lies entirely in the refinement
              region (the elements created at this level).
    BEK     : fine nodes plus nodes whose support meets the marked region.
    ONERING : fine nodes plus nodes whose support meets the refinement region.
    MG      : all nodes.
    """
    if not 1 <= level < hierarchy.n_levels:
        raise ValueError(
            f"smoothing sets exist for levels 1..{hierarchy.n_levels - 1} "
            f"(the coarsest level is solved directly), got {level}"
        )
    variant = variant.upper()
    mesh = hierarchy.meshes[level]
    n = mesh.n_vertices
    if variant == "MG":
        return np.arange(n, dtype=np.int64)
    fine = hierarchy.fine_nodes[level]
    if variant == "HB":
        return fine.copy()

    incident = np.zeros(n, dtype=np.int64)
    np.add.at(incident, mesh.tets.ravel(), 1)

    def incident_in(elems):
        cnt = np.zeros(n, dtype=np.int64)
        np.add.at(cnt, mesh.tets[elems].ravel(), 1)
        return cnt

    if variant == "BPX":
        cnt = incident_in(hierarchy.new_elements[level])
        return np.where(cnt == incident)[0].astype(np.int64)
    if variant == "BEK":
        cnt = incident_in(hierarchy.marked_region[level])
        return np.union1d(fine, np.where(cnt > 0)[0]).astype(np.int64)
    if variant == "ONERING":
        cnt = incident_in(hierarchy.new_elements[level])
        return np.union1d(fine, np.where(cnt > 0)[0]).astype(np.int64)
    raise ValueError(f"unknown smoothing-set variant {variant!r}")


_LABEL_CHARS = {SOLUTE: "m", SOLVENT: "s"}
_CHAR_LABELS = {"m": SOLUTE, "s": SOLVENT}


def write_mesh(mesh, path):
    """Write a mesh in the plain-text ``pbmesh 1`` format."""
    with open(path, "w") as f:
        f.write("pbmesh 1\n")
        f.write(f"vertices {mesh.n_vertices}\n")
        for x, y, z in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        f.write(f"tets {mesh.n_tets}\n")
        for tet, lab in zip(mesh.tets, mesh.labels):
            f.write(f"{tet[0]} {tet[1]} {tet[2]} {tet[3]} {_LABEL_CHARS[int(lab)]}\n")
        f.write(f"bfaces {mesh.boundary_faces.shape[0]}\n")
        for a, b, c in mesh.boundary_faces:
            f.write(f"{a} {b} {c}\n")


def read_mesh(path):
    """Read a ``pbmesh 1`` file and validate the mesh."""
    with open(path) as f:
        tokens = f.read().split()
    pos = 0

    def take(n=1):
        nonlocal pos
        out = tokens[pos:pos + n]
        if len(out) != n:
            raise MeshError(f"{path}: truncated file")
        pos += n
        return out

    magic, version = take(2)
    if magic != "pbmesh" or version != "1":
        raise MeshError(f"{path}: not a pbmesh 1 file")
    kw, n = take(2)
    if kw != "vertices":
        raise MeshError(f"{path}: expected 'vertices', got {kw!r}")
    nv = int(n)
    verts = np.array(take(3 * nv), dtype=np.float64).reshape(nv, 3)
    kw, n = take(2)
    if kw != "tets":
        raise MeshError(f"{path}: expected 'tets', got {kw!r}")
    nt = int(n)
    tets = np.zeros((nt, 4), dtype=np.int64)
    labels = np.zeros(nt, dtype=np.int8)
    for i in range(nt):
        rec = take(5)
        tets[i] = [int(x) for x in rec[:4]]
        if rec[4] not in _CHAR_LABELS:
            raise MeshError(f"{path}: tet {i} has unknown region label {rec[4]!r}")
        labels[i] = _CHAR_LABELS[rec[4]]
    kw, n = take(2)
    if kw != "bfaces":
        raise MeshError(f"{path}: expected 'bfaces', got {kw!r}")
    nb = int(n)
    bfaces = np.array(take(3 * nb), dtype=np.int64).reshape(nb, 3)
    mesh = SimplicialMesh(verts, tets, labels, np.sort(bfaces, axis=1))
    mesh.validate()
    return mesh
