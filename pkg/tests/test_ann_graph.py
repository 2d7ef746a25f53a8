import math
import struct

import numpy as np
import pytest

from trinity.ann_graph import (
    NeighborGraph,
    VectorStore,
    brute_force_knn,
    build_knn_graph,
    distance,
    read_graph,
    read_vectors,
    validate_graph,
    write_graph,
    write_vectors,
)
from trinity.workload import gen_vectors


class TestDistance:
    def test_identity(self):
        v = np.array([1.5, -2.0, 0.25], dtype=np.float32)
        assert distance(v, v) == 0.0

    def test_three_four_five(self):
        assert distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 25.0

    def test_matches_scalar_loop(self):
        rng = np.random.Generator(np.random.Philox(5))
        for _ in range(50):
            d = int(rng.integers(1, 48))
            a = rng.standard_normal(d).astype(np.float32)
            b = rng.standard_normal(d).astype(np.float32)
            expected = 0.0
            for x, y in zip(a.astype(np.float64), b.astype(np.float64)):
                expected += (x - y) ** 2
            assert math.isclose(distance(a, b), expected, rel_tol=1e-12)

    def test_symmetric(self):
        a = np.array([0.5, 1.0], dtype=np.float32)
        b = np.array([-1.0, 2.0], dtype=np.float32)
        assert distance(a, b) == distance(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            distance(np.zeros(3), np.zeros(4))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            distance(np.array([np.nan]), np.array([0.0]))


class TestBruteForce:
    def test_one_dim_nearest(self, line_store):
        result = brute_force_knn(line_store, np.array([0.9]), 1)
        assert result[0].id == 1
        assert result[0].dist == pytest.approx(0.01, rel=1e-6)

    def test_query_equals_row(self, line_store):
        result = brute_force_knn(line_store, line_store.data[2], 1)
        assert result[0].id == 2 and result[0].dist == 0.0

    def test_matches_full_sort_oracle(self):
        store = gen_vectors(1000, 8, seed=11)
        rng = np.random.Generator(np.random.Philox(12))
        for _ in range(20):
            q = rng.standard_normal(8)
            diff = store.data64 - q
            dists = (diff * diff).sum(axis=1)
            oracle = sorted(range(1000), key=lambda i: (dists[i], i))[:10]
            got = brute_force_knn(store, q, 10)
            assert [n.id for n in got] == oracle
            assert all(a.dist <= b.dist for a, b in zip(got, got[1:]))

    def test_full_k_is_permutation(self, line_store):
        ids = [n.id for n in brute_force_knn(line_store, np.array([0.4]), 3)]
        assert sorted(ids) == [0, 1, 2]

    def test_k_out_of_range(self, line_store):
        with pytest.raises(ValueError):
            brute_force_knn(line_store, np.array([0.0]), 4)
        with pytest.raises(ValueError):
            brute_force_knn(line_store, np.array([0.0]), 0)


class TestBuildGraph:
    def test_collinear_points(self, line_store):
        # Row 1 ties between ids 0 and 2 at distance 1; (dist, id) picks 0.
        graph = build_knn_graph(line_store, 1)
        assert graph.adjacency.tolist() == [[1], [0], [1]]

    def test_degree_two_on_three_points(self, line_store):
        graph = build_knn_graph(line_store, 2)
        assert graph.adjacency.tolist() == [[1, 2], [0, 2], [1, 0]]

    def test_rows_match_per_row_oracle(self):
        store = gen_vectors(1000, 8, seed=21)
        graph = build_knn_graph(store, 16)
        for i in range(0, 1000, 37):
            oracle = [n.id for n in brute_force_knn(store, store.data[i], 17) if n.id != i][:16]
            assert list(graph.adjacency[i]) == oracle

    def test_deterministic(self):
        store = gen_vectors(300, 4, seed=31)
        g1 = build_knn_graph(store, 8)
        g2 = build_knn_graph(store, 8)
        assert np.array_equal(g1.adjacency, g2.adjacency)

    def test_invariants_hold(self):
        store = gen_vectors(400, 6, seed=41)
        graph = build_knn_graph(store, 12)
        assert validate_graph(graph, store.count).ok

    def test_degree_bounds(self, line_store):
        with pytest.raises(ValueError):
            build_knn_graph(line_store, 3)
        with pytest.raises(ValueError):
            build_knn_graph(line_store, 0)


class TestValidateGraph:
    def test_self_loop_flagged(self):
        graph = NeighborGraph(degree=1, adjacency=np.array([[0], [0]], dtype=np.uint32))
        report = validate_graph(graph, 2)
        assert report.self_loops == [0] and not report.ok

    def test_range_violation_flagged(self):
        graph = NeighborGraph(degree=1, adjacency=np.array([[1], [2]], dtype=np.uint32))
        report = validate_graph(graph, 2)
        assert report.range_violations == [(1, 2)]

    def test_duplicate_flagged(self):
        graph = NeighborGraph(degree=2, adjacency=np.array([[1, 1], [0, 2]], dtype=np.uint32))
        report = validate_graph(graph, 3)
        assert report.duplicate_rows == [0]


class TestFileFormats:
    def test_vector_record_layout(self, tmp_path):
        path = str(tmp_path / "v.bin")
        data = np.array([[1.0, -2.5]], dtype=np.float32)
        write_vectors(path, data)
        raw = open(path, "rb").read()
        assert len(raw) == 12
        d, x0, x1 = struct.unpack("<Iff", raw)
        assert d == 2 and x0 == 1.0 and x1 == -2.5

    def test_vector_round_trip(self, tmp_path):
        path = str(tmp_path / "v.bin")
        data = gen_vectors(57, 9, seed=1).data
        write_vectors(path, data)
        assert np.array_equal(read_vectors(path), data)

    def test_vector_dimension_consistency_enforced(self, tmp_path):
        path = str(tmp_path / "bad.bin")
        with open(path, "wb") as f:
            f.write(struct.pack("<If", 1, 0.0))
            f.write(struct.pack("<Iff", 2, 0.0, 0.0))
        with pytest.raises(ValueError):
            read_vectors(path)

    def test_graph_header_layout(self, tmp_path):
        path = str(tmp_path / "g.bin")
        graph = NeighborGraph(degree=2, adjacency=np.array([[1, 2], [0, 2], [0, 1]], dtype=np.uint32))
        write_graph(path, graph)
        raw = open(path, "rb").read()
        n, d = struct.unpack("<QQ", raw[:16])
        assert (n, d) == (3, 2)
        assert len(raw) == 16 + 4 * 6

    def test_graph_round_trip(self, tmp_path):
        path = str(tmp_path / "g.bin")
        store = gen_vectors(100, 4, seed=2)
        graph = build_knn_graph(store, 5)
        write_graph(path, graph)
        loaded = read_graph(path)
        assert loaded.degree == 5
        assert np.array_equal(loaded.adjacency, graph.adjacency)

    def test_truncated_graph_rejected(self, tmp_path):
        path = str(tmp_path / "t.bin")
        with open(path, "wb") as f:
            f.write(struct.pack("<QQ", 4, 4))
            f.write(b"\x00" * 8)
        with pytest.raises(ValueError):
            read_graph(path)
