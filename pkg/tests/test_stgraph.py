import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leaf.stgraph import (
    RoadNetwork,
    SensorMeta,
    build_st_graph,
    normalize_adjacency,
    read_adjacency_csv,
)


def brute_force_edges(network: RoadNetwork, T: int) -> set[tuple[int, int]]:
    """Enumerate every node pair and test the membership rule directly."""
    n = network.n_vertices
    nodes = [(t, i) for t in range(T) for i in range(n)]
    out = set()
    for (t1, i), (t2, j) in itertools.combinations(nodes, 2):
        temporal = abs(t1 - t2) == 1 and i == j
        spatial = t1 == t2 and (min(i, j), max(i, j)) in network.edges
        if temporal or spatial:
            a, b = t1 * n + i, t2 * n + j
            out.add((min(a, b), max(a, b)))
    return out


def random_network(rng, n_max=6) -> RoadNetwork:
    n = int(rng.integers(1, n_max + 1))
    pairs = [p for p in itertools.combinations(range(n), 2) if rng.random() < 0.5]
    return RoadNetwork.from_edges(n, pairs)


class TestBuild:
    def test_two_vertices_two_steps(self):
        g = build_st_graph(RoadNetwork.from_edges(2, [(0, 1)]), 2)
        assert g.n_nodes == 4
        # nodes: v0@t0=0, v1@t0=1, v0@t1=2, v1@t1=3
        assert g.edges() == {(0, 2), (1, 3), (0, 1), (2, 3)}

    def test_single_step_is_spatial_only(self):
        net = RoadNetwork.from_edges(4, [(0, 1), (2, 3), (1, 2)])
        assert build_st_graph(net, 1).edges() == set(net.edges)

    def test_single_vertex_is_temporal_path(self):
        assert build_st_graph(RoadNetwork.from_edges(1, []), 3).edges() == {(0, 1), (1, 2)}

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            build_st_graph(RoadNetwork.from_edges(2, []), 0)

    def test_matches_brute_force_on_random_graphs(self):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            net = random_network(rng)
            T = int(rng.integers(1, 5))
            g = build_st_graph(net, T)
            expected = brute_force_edges(net, T)
            assert g.edges() == expected
            assert len(expected) == net.n_vertices * (T - 1) + T * len(net.edges)

    def test_immutable(self):
        g = build_st_graph(RoadNetwork.from_edges(2, [(0, 1)]), 2)
        with pytest.raises(ValueError):
            g.normalized[0, 0] = 3.0


class TestNormalize:
    def test_k2_with_loops(self):
        np.testing.assert_array_equal(normalize_adjacency(np.array([[0, 1], [1, 0]])), [[0.5, 0.5], [0.5, 0.5]])

    def test_k2_without_loops(self):
        np.testing.assert_array_equal(
            normalize_adjacency(np.array([[0, 1], [1, 0]]), self_loops=False), [[0, 1], [1, 0]]
        )

    def test_star_against_dense_formula(self):
        a = np.zeros((4, 4))
        a[0, 1:] = a[1:, 0] = 1
        ai = a + np.eye(4)
        d = np.diag(ai.sum(axis=1) ** -0.5)
        np.testing.assert_allclose(normalize_adjacency(a), d @ ai @ d, atol=1e-12, rtol=0)

    def test_isolated_vertex_without_loops_is_zero_row(self):
        a = np.zeros((3, 3))
        a[0, 1] = a[1, 0] = 1
        assert np.all(normalize_adjacency(a, self_loops=False)[2] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.booleans())
def test_normalized_properties(seed, T, loops):
    net = random_network(np.random.default_rng(seed))
    g = build_st_graph(net, T, self_loops=loops)
    a = g.normalized
    assert np.array_equal(g.adjacency, g.adjacency.T)
    np.testing.assert_allclose(a, a.T, atol=1e-15)
    assert np.all(a >= 0)
    if loops:
        assert np.all(np.abs(a).sum(axis=1) > 0)
    # power iteration on the symmetric matrix bounds its spectral radius
    v = np.random.default_rng(seed).random(a.shape[0]) + 0.1
    for _ in range(200):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
    assert np.linalg.norm(a @ v) <= 1 + 1e-9


@given(st.integers(1, 6), st.integers(1, 5))
def test_flatten_round_trip(n, T):
    g = build_st_graph(RoadNetwork.from_edges(n, []), T)
    seen = set()
    for t in range(T):
        for i in range(n):
            node = g.flatten(t, i)
            assert g.unflatten(node) == (t, i)
            seen.add(node)
    assert seen == set(range(n * T))


class TestRoadNetwork:
    def test_rejects_self_edge(self):
        with pytest.raises(ValueError):
            RoadNetwork.from_edges(3, [(1, 1)])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            RoadNetwork.from_edges(3, [(0, 3)])

    def test_canonical_undirected(self):
        net = RoadNetwork.from_edges(3, [(2, 0), (0, 2)])
        assert net.edges == frozenset({(0, 2)})
        assert np.array_equal(net.adjacency(), net.adjacency().T)

    def test_csv(self, tmp_path):
        path = tmp_path / "adj.csv"
        path.write_text("from,to,cost\nA,B,1.5\nC,B,\n")
        sensors = [SensorMeta("A"), SensorMeta("B"), SensorMeta("C")]
        net = read_adjacency_csv(path, sensors)
        assert net.edges == frozenset({(0, 1), (1, 2)})
        assert net.costs == {(0, 1): 1.5}

    def test_csv_unknown_id(self, tmp_path):
        path = tmp_path / "adj.csv"
        path.write_text("from,to,cost\nA,Z,1\n")
        with pytest.raises(ValueError, match="'Z'"):
            read_adjacency_csv(path, [SensorMeta("A"), SensorMeta("B")])
