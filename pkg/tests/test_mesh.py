import numpy as np
import pytest

from opic import mesh


@pytest.fixture(scope="module")
def hierarchy():
    return mesh.build_hierarchy(4)


class TestBaseIcosahedron:
    def test_counts(self):
        m = mesh.base_icosahedron()
        assert m.n_vertices == 12
        assert m.n_faces == 20
        assert m.n_edges == 30

    def test_all_pentagonal(self):
        m = mesh.base_icosahedron()
        assert all(len(m.one_ring(v)) == 5 for v in range(12))

    def test_euler_characteristic(self):
        m = mesh.base_icosahedron()
        assert m.n_vertices - m.n_edges + m.n_faces == 2


class TestSubdivide:
    def test_vertex_counts(self):
        m0 = mesh.base_icosahedron()
        m1 = mesh.subdivide(m0)
        m2 = mesh.subdivide(m1)
        assert m1.n_vertices == 42  # V + E = 12 + 30
        assert m2.n_vertices == 162

    def test_prefix_is_bit_exact(self):
        m0 = mesh.base_icosahedron()
        m1 = mesh.subdivide(m0)
        assert np.array_equal(m1.vertices[:12], m0.vertices)

    def test_faces_quadruple(self):
        m0 = mesh.base_icosahedron()
        assert mesh.subdivide(m0).n_faces == 4 * m0.n_faces

    def test_level_increments(self):
        m0 = mesh.base_icosahedron()
        assert mesh.subdivide(m0).level == 1


class TestHierarchy:
    def test_single_level(self):
        h = mesh.build_hierarchy(0)
        assert len(h.levels) == 1
        assert h.finest.n_vertices == 12

    def test_level4_count(self, hierarchy):
        assert hierarchy.finest.n_vertices == 2562  # 10*4^4 + 2

    def test_level6_count(self):
        assert mesh.build_hierarchy(6).finest.n_vertices == 40962

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            mesh.build_hierarchy(-1)

    def test_parents_are_coarse_edges(self, hierarchy):
        for k in range(len(hierarchy.levels) - 1):
            coarse, fine = hierarchy.levels[k], hierarchy.levels[k + 1]
            parents = hierarchy.parents[k]
            assert parents.shape == (fine.n_vertices - coarse.n_vertices, 2)
            edges = {tuple(e) for e in coarse.edges}
            assert all(tuple(p) in edges for p in parents)

    def test_parents_match_fine_rings(self, hierarchy):
        coarse, fine = hierarchy.levels[1], hierarchy.levels[2]
        parents = hierarchy.parents[1]
        for i in (0, 17, len(parents) - 1):
            ring = fine.one_ring(coarse.n_vertices + i)
            assert set(parents[i]) == set(ring[ring < coarse.n_vertices])

    def test_midpoint_children_average_parents(self, hierarchy):
        coarse, fine = hierarchy.levels[2], hierarchy.levels[3]
        parents = hierarchy.parents[2]
        mids = coarse.vertices[parents[:, 0]] + coarse.vertices[parents[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        assert np.array_equal(fine.vertices[coarse.n_vertices:], mids)


class TestInvariants:
    @pytest.mark.parametrize("level", range(6))
    def test_counts_and_geometry(self, level):
        h = mesh.build_hierarchy(level)
        m = h.finest
        assert m.n_vertices == 10 * 4**level + 2
        assert int((m.degree == 5).sum()) == 12
        assert m.n_vertices - m.n_edges + m.n_faces == 2
        assert np.max(np.abs(np.linalg.norm(m.vertices, axis=1) - 1.0)) < 1e-12

    def test_neighbor_symmetry(self, hierarchy):
        m = hierarchy.mesh_at(3)
        for v in range(0, m.n_vertices, 97):
            for u in m.one_ring(v):
                assert v in m.one_ring(u)

    def test_rings_counter_clockwise_from_outside(self, hierarchy):
        m = hierarchy.mesh_at(2)
        p = m.vertices
        for v in range(0, m.n_vertices, 13):
            ring = m.one_ring(v)
            for i in range(len(ring)):
                a = p[ring[i]] - p[v]
                b = p[ring[(i + 1) % len(ring)]] - p[v]
                assert np.dot(np.cross(a, b), p[v]) > 0

    def test_ring_starts_at_lowest_index(self, hierarchy):
        m = hierarchy.mesh_at(2)
        for v in range(0, m.n_vertices, 31):
            ring = m.one_ring(v)
            assert ring[0] == ring.min()


class TestOneRing:
    def test_level0_length(self):
        m = mesh.base_icosahedron()
        assert all(len(mesh.one_ring(m, v)) == 5 for v in range(12))

    def test_only_original_vertices_pentagonal(self, hierarchy):
        m = hierarchy.mesh_at(2)
        assert all(len(m.one_ring(v)) == 6 for v in range(12, m.n_vertices))
        assert all(len(m.one_ring(v)) == 5 for v in range(12))

    def test_deterministic(self, hierarchy):
        m = hierarchy.mesh_at(2)
        assert np.array_equal(m.one_ring(40), m.one_ring(40))

    def test_out_of_range(self):
        m = mesh.base_icosahedron()
        with pytest.raises(IndexError):
            mesh.one_ring(m, 12)


class TestExchangeFormat:
    def test_round_trip(self, tmp_path, hierarchy):
        m = hierarchy.mesh_at(2)
        path = tmp_path / "mesh.txt"
        mesh.save_mesh_text(m, path)
        loaded = mesh.load_mesh_text(path, level=2)
        assert np.array_equal(loaded.vertices, m.vertices)  # repr round-trips floats
        assert np.array_equal(loaded.faces, m.faces)
        assert np.array_equal(loaded.ring, m.ring)

    def test_ingestion_derives_neighbors(self):
        m = mesh.base_icosahedron()
        again = mesh.mesh_from_arrays(m.vertices, m.faces)
        assert np.array_equal(again.ring, m.ring)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("faces 0\n")
        with pytest.raises(ValueError):
            mesh.load_mesh_text(p)


class TestTables:
    def test_conv_taps_center_and_ring(self, hierarchy):
        m = hierarchy.mesh_at(2)
        t = mesh.conv_tables(m)
        assert np.array_equal(t.tap[:, 0], np.arange(m.n_vertices))
        v = 20  # hexagonal
        assert np.array_equal(t.tap[v, 1:], m.one_ring(v))
        v = 3  # pentagonal: 7th tap re-reads the center
        assert t.tap[v, 6] == v

    def test_conv_inverse_is_exact_adjoint(self, hierarchy):
        m = hierarchy.mesh_at(1)
        t = mesh.conv_tables(m)
        rng = np.random.default_rng(0)
        x = rng.standard_normal(m.n_vertices)
        y = rng.standard_normal((m.n_vertices, 7))
        # <gather(x), y> == <x, scatter(y)>
        lhs = float((x[t.tap] * y).sum())
        scattered = y.ravel()[t.inv_flat].sum(axis=1)
        rhs = float((x * scattered).sum())
        assert abs(lhs - rhs) < 1e-9

    def test_pool_weights_average(self, hierarchy):
        t = mesh.pool_tables(hierarchy, 2)
        sums = t.weight.sum(axis=1)
        assert np.allclose(sums, 1.0)
        degrees = (t.weight > 0).sum(axis=1)
        assert set(degrees.tolist()) == {6, 7}  # pentagons average 6 values

    def test_unpool_rows(self, hierarchy):
        coarse = hierarchy.mesh_at(1)
        t = mesh.unpool_tables(hierarchy, 1)
        n_c = coarse.n_vertices
        assert np.allclose(t.weight[:n_c, 0], 1.0)
        assert np.allclose(t.weight[n_c:], 0.5)

    def test_transfer_inverses_are_adjoints(self, hierarchy):
        rng = np.random.default_rng(1)
        for tables in (mesh.pool_tables(hierarchy, 2), mesh.unpool_tables(hierarchy, 1)):
            n_out, n_in = tables.idx.shape[0], tables.inv_idx.shape[0]
            x = rng.standard_normal(n_in)
            y = rng.standard_normal(n_out)
            fwd = (x[tables.idx] * tables.weight).sum(axis=1)
            adj = (y[tables.inv_idx] * tables.inv_weight).sum(axis=1)
            assert abs(float(fwd @ y) - float(x @ adj)) < 1e-9
