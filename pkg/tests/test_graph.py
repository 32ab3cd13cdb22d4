"""Radius-graph construction vs an O(n^2) brute-force oracle."""

import numpy as np
import pytest

from mesograph.data import CellRecord
from mesograph.graph import (
    DirectedAdjacency,
    build_radius_graph,
    degree_stats,
    grid_neighbors,
    write_edge_list,
)


def make_cells(coords, d0=2):
    return [
        CellRecord(cell_id=k, x_um=float(x), y_um=float(y), features=np.zeros(d0))
        for k, (x, y) in enumerate(coords)
    ]


def brute_force_edges(coords, radius):
    """Every unordered pair at Euclidean distance <= radius, i < j."""
    coords = np.asarray(coords, dtype=np.float64)
    out = []
    for i in range(len(coords)):
        for j in range(i + 1, len(coords)):
            d2 = np.sum((coords[i] - coords[j]) ** 2)
            if d2 <= radius * radius:
                out.append((i, j))
    return out


def edges_as_set(graph):
    return {(int(i), int(j)) for i, j in graph.edges}


class TestKnownLayouts:
    def test_collinear_points(self):
        g = build_radius_graph(make_cells([(0, 0), (20, 0), (50, 0)]), 30.0)
        assert edges_as_set(g) == {(0, 1), (1, 2)}

    def test_single_cell_has_no_edges(self):
        g = build_radius_graph(make_cells([(5, 5)]), 30.0)
        assert g.n == 1 and len(g.edges) == 0

    def test_empty_input(self):
        g = build_radius_graph(make_cells([]), 30.0)
        assert g.n == 0 and len(g.edges) == 0
        assert degree_stats(g) == (0, 0.0, 0)

    def test_boundary_distance_connects(self):
        g = build_radius_graph(make_cells([(0, 0), (30, 0)]), 30.0)
        assert edges_as_set(g) == {(0, 1)}

    def test_just_outside_boundary_does_not(self):
        g = build_radius_graph(make_cells([(0, 0), (30.0000001, 0)]), 30.0)
        assert len(g.edges) == 0

    def test_duplicate_coordinates_are_connected(self):
        # distinct cells at distance 0: connected, but never self-paired
        g = build_radius_graph(make_cells([(10, 10), (10, 10), (200, 200)]), 30.0)
        assert edges_as_set(g) == {(0, 1)}

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError, match="radius"):
            build_radius_graph(make_cells([(0, 0)]), 0.0)


class TestDegreeStats:
    def test_path_graph(self):
        g = build_radius_graph(make_cells([(0, 0), (20, 0), (40, 0)]), 30.0)
        assert edges_as_set(g) == {(0, 1), (1, 2)}
        assert degree_stats(g) == (1, pytest.approx(4.0 / 3.0), 2)

    def test_edgeless(self):
        g = build_radius_graph(make_cells([(0, 0), (100, 0)]), 30.0)
        assert degree_stats(g) == (0, 0.0, 0)

    def test_complete_on_four(self):
        g = build_radius_graph(make_cells([(0, 0), (10, 0), (0, 10), (10, 10)]), 30.0)
        assert degree_stats(g) == (3, 3.0, 3)


class TestGridCandidates:
    def test_same_bucket_pair_emitted(self):
        coords = np.array([[1.0, 1.0], [2.0, 2.0]])
        cands = set()
        for chunk in grid_neighbors(coords, 30.0):
            cands.update(map(tuple, chunk))
        assert (0, 1) in cands

    def test_two_buckets_apart_on_diagonal_not_candidates(self):
        # bucket indices (0,0) and (2,2): not adjacent, never compared
        coords = np.array([[0.0, 0.0], [60.0, 60.0]])
        for chunk in grid_neighbors(coords, 30.0):
            assert len(chunk) == 0
    def test_candidates_superset_of_true_edges(self):
        rng = np.random.default_rng(21)
        coords = rng.uniform(0, 300, size=(80, 2))
        cands = set()
        for chunk in grid_neighbors(coords, 30.0):
            cands.update((int(a), int(b)) for a, b in chunk)
        for pair in brute_force_edges(coords, 30.0):
            assert pair in cands


class TestBruteForceOracle:
    def test_random_points_match_oracle(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(0, 1000, size=(500, 2))
        g = build_radius_graph(make_cells(coords), 30.0)
        assert sorted(edges_as_set(g)) == brute_force_edges(coords, 30.0)

    def test_clustered_points_match_oracle(self):
        rng = np.random.default_rng(8)
        centers = rng.uniform(0, 400, size=(6, 2))
        coords = np.concatenate(
            [c + rng.normal(0, 25, size=(40, 2)) for c in centers]
        )
        for radius in (10.0, 30.0, 75.0):
            g = build_radius_graph(make_cells(coords), radius)
            assert sorted(edges_as_set(g)) == brute_force_edges(coords, radius)

    def test_exact_boundary_pairs_in_random_set(self):
        rng = np.random.default_rng(9)
        coords = list(rng.uniform(0, 500, size=(50, 2)))
        # plant pairs at exactly the radius
        for k in range(5):
            base = np.array([100.0 * k, 400.0])
            coords.append(base)
            coords.append(base + np.array([30.0, 0.0]))
        coords = np.array(coords)
        g = build_radius_graph(make_cells(coords), 30.0)
        assert sorted(edges_as_set(g)) == brute_force_edges(coords, 30.0)


class TestGraphProperties:
    def test_permutation_relabel_invariance(self):
        rng = np.random.default_rng(31)
        coords = rng.uniform(0, 200, size=(60, 2))
        g = build_radius_graph(make_cells(coords), 30.0)
        perm = rng.permutation(60)
        g2 = build_radius_graph(make_cells(coords[perm]), 30.0)
        # relabel g's edges through the permutation's inverse
        inv = np.empty(60, dtype=np.int64)
        inv[perm] = np.arange(60)
        relabeled = {
            (min(int(inv[i]), int(inv[j])), max(int(inv[i]), int(inv[j])))
            for i, j in g.edges
        }
        assert relabeled == edges_as_set(g2)

    def test_radius_monotonicity(self):
        rng = np.random.default_rng(32)
        coords = rng.uniform(0, 300, size=(70, 2))
        prev = set()
        for radius in (5.0, 15.0, 30.0, 60.0, 120.0):
            cur = edges_as_set(build_radius_graph(make_cells(coords), radius))
            assert prev <= cur
            prev = cur

    def test_edges_sorted_unique_no_self_loops(self):
        rng = np.random.default_rng(33)
        coords = rng.uniform(0, 150, size=(50, 2))
        g = build_radius_graph(make_cells(coords), 30.0)
        e = g.edges
        assert np.all(e[:, 0] < e[:, 1])
        as_tuples = list(map(tuple, e))
        assert as_tuples == sorted(set(as_tuples))


class TestDirectedAdjacency:
    def test_degrees_and_reverse_permutation(self):
        rng = np.random.default_rng(41)
        coords = rng.uniform(0, 200, size=(40, 2))
        g = build_radius_graph(make_cells(coords), 30.0)
        adj = g.adjacency()
        # reverse of reverse is identity
        assert np.array_equal(adj.rev[adj.rev], np.arange(adj.n_edges))
        # reversing an edge swaps endpoints (self-edges are fixed points)
        assert np.array_equal(adj.center[adj.rev], adj.nbr)
        assert np.array_equal(adj.nbr[adj.rev], adj.center)
        # center is grouped ascending for reduceat
        assert np.all(np.diff(adj.center) >= 0)

    def test_sum_by_center_matches_add_at(self):
        rng = np.random.default_rng(42)
        coords = rng.uniform(0, 120, size=(25, 2))
        adj = build_radius_graph(make_cells(coords), 30.0).adjacency()
        e = rng.normal(size=(adj.n_edges, 3))
        expected = np.zeros((25, 3))
        np.add.at(expected, adj.center, e)
        np.testing.assert_allclose(adj.sum_by_center(e), expected, atol=1e-12)

    def test_cached_on_graph(self):
        g = build_radius_graph(make_cells([(0, 0), (10, 0)]), 30.0)
        assert g.adjacency() is g.adjacency()


def test_write_edge_list(tmp_path):
    g = build_radius_graph(make_cells([(0, 0), (20, 0), (50, 0)]), 30.0)
    edges_path = tmp_path / "edges.txt"
    nodes_path = tmp_path / "nodes.csv"
    write_edge_list(g, edges_path, nodes_path)
    lines = edges_path.read_text().strip().splitlines()
    assert lines == ["0 1", "1 2"]
    node_lines = nodes_path.read_text().strip().splitlines()
    assert len(node_lines) == 1 + g.n
