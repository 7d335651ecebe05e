import numpy as np
import pytest

from pbsolve.mesh import (SOLUTE, SOLVENT, MeshHierarchy, SimplicialMesh,
                          bisect_refine, mesh_geometry, read_mesh,
                          smoothing_set, write_mesh)

from conftest import check_conforming, cube_mesh


class TestBisect:
    def test_single_tet(self, reference_tet):
        h = MeshHierarchy(reference_tet)
        bisect_refine(h, [0])
        m = h.meshes[1]
        assert m.n_tets == 2
        assert m.n_vertices == 5
        # longest edges (1,2),(1,3),(2,3) tie at sqrt(2); lexicographic
        # tie-break picks (1,2), so the new node is its midpoint
        np.testing.assert_allclose(m.vertices[4], [0.5, 0.5, 0.0])
        assert set(m.labels) == {SOLUTE}
        # both children contain the midpoint
        assert all(4 in tet for tet in m.tets)
        check_conforming(m)

    def test_closure_two_tets(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        m = h.meshes[1]
        assert m.n_tets == 4
        check_conforming(m)
        # children inherit labels: two SOLUTE children, two SOLVENT children
        assert (m.labels == SOLUTE).sum() == 2
        assert (m.labels == SOLVENT).sum() == 2
        # closure-created elements belong to the refinement region but not
        # to the marked region
        assert len(h.new_elements[1]) == 4
        assert len(h.marked_region[1]) == 2

    def test_empty_marked_set(self, reference_tet):
        h = MeshHierarchy(reference_tet)
        with pytest.raises(ValueError, match="nothing to refine"):
            bisect_refine(h, [])

    def test_invalid_element_id(self, reference_tet):
        h = MeshHierarchy(reference_tet)
        with pytest.raises(ValueError, match="out of range"):
            bisect_refine(h, [7])

    def test_random_marks_conformity(self):
        mesh = cube_mesh()
        h = MeshHierarchy(mesh)
        rng = np.random.default_rng(42)
        for _ in range(5):
            n = h.finest.n_tets
            k = rng.integers(1, max(2, n // 3))
            marked = rng.choice(n, size=k, replace=False)
            bisect_refine(h, marked)
            check_conforming(h.finest)
            h.finest.validate()

    def test_node_ids_stable(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        bisect_refine(h, [0, 1])
        for j in range(1, h.n_levels):
            prev, cur = h.meshes[j - 1], h.meshes[j]
            assert cur.n_vertices >= prev.n_vertices
            np.testing.assert_array_equal(cur.vertices[: prev.n_vertices],
                                          prev.vertices)
            fine = h.fine_nodes[j]
            np.testing.assert_array_equal(
                fine, np.arange(prev.n_vertices, cur.n_vertices))
            # each fine node is the midpoint of its parent edge
            for m, (a, b) in zip(fine, h.parent_edges[j]):
                np.testing.assert_allclose(
                    cur.vertices[m], 0.5 * (cur.vertices[a] + cur.vertices[b]))

    def test_determinism(self):
        def run():
            h = MeshHierarchy(cube_mesh())
            rng = np.random.default_rng(3)
            for _ in range(3):
                n = h.finest.n_tets
                bisect_refine(h, rng.choice(n, size=n // 4 + 1, replace=False))
            return h.finest

        m1, m2 = run(), run()
        np.testing.assert_array_equal(m1.tets, m2.tets)
        np.testing.assert_array_equal(m1.vertices, m2.vertices)


class TestShapeQuality:
    @staticmethod
    def min_dihedral(mesh):
        from pbsolve.mesh import _FACES

        angles = []
        for tet in mesh.tets:
            p = mesh.vertices[tet]
            normals = []
            for f in _FACES:
                a, b, c = p[f[0]], p[f[1]], p[f[2]]
                n = np.cross(b - a, c - a)
                normals.append(n / np.linalg.norm(n))
            for i in range(4):
                for j in range(i + 1, 4):
                    cosang = -np.dot(normals[i], normals[j])
                    angles.append(np.arccos(np.clip(cosang, -1, 1)))
        return np.degrees(min(angles))

    def test_uniform_bisection_quality(self, reference_tet):
        h = MeshHierarchy(reference_tet)
        minima = [self.min_dihedral(h.finest)]
        for _ in range(8):
            bisect_refine(h, np.arange(h.finest.n_tets))
            minima.append(self.min_dihedral(h.finest))
        # bounded below by a fixed constant: bisection of this tetrahedron
        # cycles through finitely many similarity classes
        assert min(minima) > 30.0
        for r in range(3, 8):
            assert minima[r + 1] >= minima[r] - 1e-9


class TestSmoothingSets:
    def test_mg_is_everything(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        x = smoothing_set(h, 1, "MG")
        assert len(x) == h.meshes[1].n_vertices
        np.testing.assert_array_equal(x, np.arange(h.meshes[1].n_vertices))

    def test_hb_is_fine_nodes(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        np.testing.assert_array_equal(smoothing_set(h, 1, "HB"), h.fine_nodes[1])

    def test_level_zero_rejected(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        with pytest.raises(ValueError, match="coarsest"):
            smoothing_set(h, 0, "HB")

    def test_two_level_hand_enumeration(self, two_tets):
        h = MeshHierarchy(two_tets)
        bisect_refine(h, [0])
        mesh = h.meshes[1]
        # brute-force support enumeration: node -> set of incident elements
        support = {n: set() for n in range(mesh.n_vertices)}
        for e, tet in enumerate(mesh.tets):
            for n in tet:
                support[int(n)].add(e)
        new = set(map(int, h.new_elements[1]))
        markreg = set(map(int, h.marked_region[1]))
        fine = set(map(int, h.fine_nodes[1]))
        bpx = {n for n, s in support.items() if s <= new}
        bek = fine | {n for n, s in support.items() if s & markreg}
        oner = fine | {n for n, s in support.items() if s & new}
        np.testing.assert_array_equal(smoothing_set(h, 1, "BPX"), sorted(bpx))
        np.testing.assert_array_equal(smoothing_set(h, 1, "BEK"), sorted(bek))
        np.testing.assert_array_equal(smoothing_set(h, 1, "ONERING"), sorted(oner))

    def test_nesting_random_hierarchy(self):
        h = MeshHierarchy(cube_mesh())
        rng = np.random.default_rng(7)
        for _ in range(4):
            n = h.finest.n_tets
            bisect_refine(h, rng.choice(n, size=max(1, n // 5), replace=False))
        for j in range(1, h.n_levels):
            hb = set(map(int, smoothing_set(h, j, "HB")))
            bpx = set(map(int, smoothing_set(h, j, "BPX")))
            bek = set(map(int, smoothing_set(h, j, "BEK")))
            oner = set(map(int, smoothing_set(h, j, "ONERING")))
            assert hb <= bpx and hb <= bek
            assert bek <= oner and bpx <= oner
            assert len(smoothing_set(h, j, "MG")) == h.meshes[j].n_vertices


class TestGeometry:
    def test_reference_tet(self, reference_tet):
        geo = mesh_geometry(reference_tet)
        np.testing.assert_allclose(geo.volumes, [1 / 6])
        np.testing.assert_allclose(geo.diameters, [np.sqrt(2)])
        np.testing.assert_allclose(np.linalg.norm(geo.face_normals, axis=1), 1.0)

    def test_unit_area_face(self):
        v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        mesh = SimplicialMesh(v, [[0, 1, 2, 3]], [SOLUTE])
        geo = mesh_geometry(mesh)
        # face (0,1,2) has area |(2,0,0) x (0,1,0)|/2 = 1
        key = [tuple(sorted(f)) for f in geo.faces]
        i = key.index((0, 1, 2))
        np.testing.assert_allclose(geo.face_areas[i], 1.0)
        np.testing.assert_allclose(np.abs(geo.face_normals[i]), [0, 0, 1])

    def test_affine_volume_oracle(self, reference_tet):
        rng = np.random.default_rng(11)
        for _ in range(20):
            M = rng.normal(size=(3, 3))
            if abs(np.linalg.det(M)) < 1e-3:
                continue
            v = reference_tet.vertices @ M.T + rng.normal(size=3)
            tets = np.array([[0, 1, 2, 3]])
            if np.linalg.det(M) < 0:
                tets = np.array([[0, 2, 1, 3]])
            mesh = SimplicialMesh(v, tets, [SOLUTE])
            geo = mesh_geometry(mesh)
            np.testing.assert_allclose(geo.volumes[0],
                                       abs(np.linalg.det(M)) / 6, rtol=1e-12)

    def test_degenerate_element_error(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        mesh = SimplicialMesh.__new__(SimplicialMesh)
        mesh.vertices = v
        mesh.tets = np.array([[0, 1, 2, 3]])
        mesh.labels = np.array([SOLUTE], dtype=np.int8)
        mesh.boundary_faces = np.zeros((0, 3), dtype=np.int64)
        with pytest.raises(ValueError, match="element 0"):
            mesh_geometry(mesh)

    def test_interface_faces(self, cube6):
        geo = mesh_geometry(cube6)
        for f in geo.interface_faces:
            left, right = geo.face_elems[f]
            assert cube6.labels[left] != cube6.labels[right]


class TestMeshIO:
    def test_roundtrip(self, tmp_path, cube6):
        path = tmp_path / "mesh.pbmesh"
        write_mesh(cube6, path)
        back = read_mesh(path)
        np.testing.assert_allclose(back.vertices, cube6.vertices)
        np.testing.assert_array_equal(back.tets, cube6.tets)
        np.testing.assert_array_equal(back.labels, cube6.labels)

    def test_reject_garbage(self, tmp_path):
        path = tmp_path / "bad.pbmesh"
        path.write_text("not_a_mesh 2\n")
        with pytest.raises(ValueError):
            read_mesh(path)
