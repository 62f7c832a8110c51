import numpy as np
import pytest

from brinkfem.mesh import (MeshError, build_lshape, build_structured_square,
                           refine_bisect, refine_uniform)


def interior_angle_sums(mesh):
    """Accumulated interior angle at each vertex."""
    sums = np.zeros(mesh.num_vertices)
    p = mesh.vertices[mesh.triangles]
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = (a * b).sum(axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        ang = np.arccos(np.clip(cosang, -1, 1))
        np.add.at(sums, mesh.triangles[:, k], ang)
    return sums


def assert_conforming(mesh):
    """No hanging nodes: interior vertices see a full angle turn."""
    on_boundary = np.zeros(mesh.num_vertices, dtype=bool)
    bnd = mesh.boundary_edge_mask
    on_boundary[np.unique(mesh.edges[bnd])] = True
    sums = interior_angle_sums(mesh)
    assert np.allclose(sums[~on_boundary], 2 * np.pi, atol=1e-9)
    two = (mesh.edge_tris >= 0).sum(axis=1)
    assert np.all(two[bnd] == 1)
    assert np.all(two[~bnd] == 2)


class TestStructuredSquare:
    def test_counts_n4(self):
        m = build_structured_square(4)
        assert (m.num_vertices, m.num_triangles, m.num_edges) == (25, 32, 56)

    def test_counts_n1(self):
        m = build_structured_square(1, lo=(0, 0), hi=(1, 1))
        assert (m.num_vertices, m.num_triangles, m.num_edges) == (4, 2, 5)

    def test_diameters_n2(self):
        m = build_structured_square(2)
        assert np.allclose(m.tri_diameters, np.sqrt(2.0))

    def test_rejects_zero(self):
        with pytest.raises(MeshError):
            build_structured_square(0)

    def test_euler_formula(self):
        for n in (1, 3, 8):
            m = build_structured_square(n)
            assert m.num_vertices - m.num_edges + m.num_triangles + 1 == 2

    def test_area_and_perimeter(self):
        m = build_structured_square(5)
        assert abs(m.areas.sum() - 4.0) <= 1e-12 * 4.0
        bnd = m.boundary_edge_mask
        assert abs(m.edge_lengths[bnd].sum() - 8.0) <= 1e-12 * 8.0
        assert set(m.edge_markers[bnd]) == {1, 2, 3, 4}
        for marker in (1, 2, 3, 4):
            sel = bnd & (m.edge_markers == marker)
            assert np.isclose(m.edge_lengths[sel].sum(), 2.0)


class TestLShape:
    def test_counts_n2(self):
        m = build_lshape(2)
        assert (m.num_vertices, m.num_triangles) == (8, 6)

    def test_counts_n4(self):
        m = build_lshape(4)
        assert m.num_triangles == 2 * (16 - 4)

    def test_no_vertex_in_removed_quadrant(self):
        for n in (2, 4, 8):
            m = build_lshape(n)
            inside = ((m.vertices[:, 0] < -1e-12) & (m.vertices[:, 1] < -1e-12))
            assert not inside.any()

    def test_rejects_odd(self):
        with pytest.raises(MeshError):
            build_lshape(3)

    def test_area_and_perimeter(self):
        m = build_lshape(4)
        assert abs(m.areas.sum() - 3.0) <= 1e-12 * 3.0
        bnd = m.boundary_edge_mask
        assert abs(m.edge_lengths[bnd].sum() - 8.0) <= 1e-12 * 8.0
        assert set(m.edge_markers[bnd]) == {1, 2, 3, 4, 5, 6}


class TestRefineUniform:
    def test_quadruples_triangles(self):
        m = build_structured_square(4)
        r = refine_uniform(m)
        assert r.num_triangles == 128

    def test_halves_h(self):
        m = build_structured_square(4)
        r = refine_uniform(m)
        assert np.isclose(r.h, m.h / 2)

    def test_vertex_count(self):
        m = build_lshape(4)
        r = refine_uniform(m)
        assert r.num_vertices == m.num_vertices + m.num_edges

    def test_matches_finer_structured_mesh(self):
        r = refine_uniform(build_structured_square(4))
        fine = build_structured_square(8)
        assert r.num_triangles == fine.num_triangles
        a = set(map(tuple, np.round(r.vertices, 12)))
        b = set(map(tuple, np.round(fine.vertices, 12)))
        assert a == b

    def test_conforming(self):
        r = refine_uniform(refine_uniform(build_lshape(2)))
        assert_conforming(r)
        assert abs(r.areas.sum() - 3.0) <= 1e-12 * 3.0


class TestRefineBisect:
    def test_mark_all_at_least_doubles(self):
        m = build_structured_square(2)
        r = refine_bisect(m, np.arange(m.num_triangles))
        assert r.num_triangles >= 2 * m.num_triangles
        assert_conforming(r)

    def test_mark_one_interior_conforming(self):
        m = build_structured_square(4)
        cent = m.centroids()
        inner = int(np.argmin(np.abs(cent).sum(axis=1)))
        r = refine_bisect(m, [inner])
        assert_conforming(r)
        assert abs(r.areas.sum() - 4.0) <= 1e-11

    def test_rejects_bad_input(self):
        m = build_structured_square(2)
        with pytest.raises(MeshError):
            refine_bisect(m, [])
        with pytest.raises(MeshError):
            refine_bisect(m, [m.num_triangles])

    def test_corner_refinement_angle_plateau(self):
        m = build_lshape(2)
        base_angle = m.min_angle()
        angles = []
        for _ in range(20):
            touching = np.nonzero(
                (np.abs(m.vertices[m.triangles]) < 1e-12).all(axis=2).any(axis=1))[0]
            m = refine_bisect(m, touching)
            angles.append(m.min_angle())
        assert_conforming(m)
        # bounded similarity classes: plateau after the first few rounds
        assert np.allclose(angles[3:], angles[-1], atol=1e-12)
        assert angles[-1] >= base_angle / 4.0

    def test_parent_map(self):
        m = build_structured_square(2)
        r = refine_bisect(m, [0])
        assert len(r.parent_triangles) == r.num_triangles
        child_cent = r.centroids()
        for child, parent in enumerate(r.parent_triangles):
            tri = m.vertices[m.triangles[parent]]
            d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
            rhs = child_cent[child] - tri[0]
            det = d1[0] * d2[1] - d1[1] * d2[0]
            l1 = (rhs[0] * d2[1] - rhs[1] * d2[0]) / det
            l2 = (d1[0] * rhs[1] - d1[1] * rhs[0]) / det
            assert -1e-12 <= l1 and -1e-12 <= l2 and l1 + l2 <= 1 + 1e-12


class TestEdgeTopology:
    def test_two_triangle_square(self):
        m = build_structured_square(1, lo=(0, 0), hi=(1, 1))
        topo = m.edge_topology()
        assert len(topo.interior_edges) == 1
        assert len(topo.boundary_edges) == 4

    def test_counts_sum(self):
        m = build_lshape(4)
        topo = m.edge_topology()
        assert len(topo.interior_edges) + len(topo.boundary_edges) == m.num_edges

    def test_unit_normals(self):
        m = build_structured_square(3)
        topo = m.edge_topology()
        for normals in (topo.interior_normals, topo.boundary_normals):
            assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-14)

    def test_interior_normal_orientation(self):
        m = build_structured_square(2)
        topo = m.edge_topology()
        assert np.all(topo.tri_plus < topo.tri_minus)
        cent = m.centroids()
        d = cent[topo.tri_minus] - cent[topo.tri_plus]
        assert np.all((topo.interior_normals * d).sum(axis=1) > 0)

    def test_boundary_normals_point_outward(self):
        m = build_structured_square(2)
        topo = m.edge_topology()
        mids = 0.5 * (m.vertices[m.edges[topo.boundary_edges, 0]]
                      + m.vertices[m.edges[topo.boundary_edges, 1]])
        assert np.all((topo.boundary_normals * mids).sum(axis=1) > 0)
