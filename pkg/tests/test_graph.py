import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pggcn.exceptions import ConfigurationError, DataError
from pggcn.graph import (SkeletonGraph, build_ntu_graph, chain_graph, normalize_adjacency,
                         normalized_adjacency, read_graph_file, write_graph_file)


def dense_oracle(n, edges):
    a = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for i, j in edges:
        a[i][j] = a[j][i] = 1.0
    deg = [sum(row) for row in a]
    return np.array([[a[i][j] / (deg[i] * deg[j]) ** 0.5 for j in range(n)] for i in range(n)])


def test_ntu_graph_shape():
    g = build_ntu_graph()
    assert g.num_joints == 25
    assert len(g.edges) == 24
    assert g.center_joint == 1
    assert g.is_connected()
    assert (g.hop_distance() >= 0).all()


def test_ntu_adjacency_matches_dense_oracle():
    g = build_ntu_graph()
    a_hat = normalized_adjacency(g)
    np.testing.assert_allclose(a_hat, dense_oracle(25, g.edges), rtol=0, atol=1e-15)
    assert np.abs(a_hat - a_hat.T).max() <= 1e-12


def test_spine_shoulder_row():
    # joint 20 (spine shoulder) touches 1, 2, 4, 8: degree 5 with the self-loop
    a_hat = normalized_adjacency(build_ntu_graph())
    deg = {20: 5, 1: 3, 2: 3, 4: 3, 8: 3}
    for j, dj in deg.items():
        assert a_hat[20, j] == pytest.approx(1 / np.sqrt(5 * dj), abs=1e-15)
    assert np.count_nonzero(a_hat[20]) == 5


def test_custom_chain():
    g = SkeletonGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    assert g.is_connected()
    assert list(g.parents()) == [0, 0, 1, 2, 3]


def test_single_joint():
    g = SkeletonGraph.from_edges(1, [], 0)
    np.testing.assert_array_equal(normalize_adjacency(g).sum(axis=0), [[1.0]])


def test_two_joints():
    g = SkeletonGraph.from_edges(2, [(0, 1)], 0)
    np.testing.assert_allclose(normalized_adjacency(g), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_isolated_joint_allowed_only_explicitly():
    with pytest.raises(ConfigurationError):
        SkeletonGraph.from_edges(3, [(0, 1)], 0)
    g = SkeletonGraph.from_edges(3, [(0, 1)], 0, allow_disconnected=True)
    stack = normalize_adjacency(g)
    assert stack[:, 2, 2].sum() == 1.0
    assert stack[:, 2].sum() == 1.0


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 1), (1, 0)], [(0, 5)]])
def test_invalid_edges(edges):
    with pytest.raises(ConfigurationError):
        SkeletonGraph(3, tuple(edges))


@pytest.mark.parametrize("g", [build_ntu_graph(), chain_graph(7, 3), chain_graph(4, 0)])
def test_partitions_sum_to_normalized(g):
    stack = normalize_adjacency(g)
    assert stack.shape == (3, g.num_joints, g.num_joints)
    assert (stack >= 0).all()
    np.testing.assert_allclose(stack.sum(axis=0), normalized_adjacency(g), rtol=0, atol=1e-10)


def test_spatial_partition_roles():
    # chain 0-1-2-3-4 centered at 2
    root, centripetal, centrifugal = normalize_adjacency(chain_graph(5, 2))
    assert np.count_nonzero(root) == 5 and np.all(np.diag(root) > 0)
    # joint 0 looks toward 1 (closer to the center), joint 1 outward to 0
    assert centripetal[0, 1] > 0 and centrifugal[0, 1] == 0
    assert centrifugal[1, 0] > 0 and centripetal[1, 0] == 0
    assert centrifugal[2, 1] > 0 and centrifugal[2, 3] > 0


def test_uniform_partition():
    g = chain_graph(4, 1, partitions=1)
    stack = normalize_adjacency(g)
    assert stack.shape == (1, 4, 4)
    np.testing.assert_array_equal(stack[0], normalized_adjacency(g))


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(25))))
def test_permutation_equivariance(perm):
    g = build_ntu_graph()
    perm = np.array(perm)
    p = np.eye(25)[perm]            # row k selects old joint perm[k]
    expected = np.einsum("ij,kjl,ml->kim", p, normalize_adjacency(g), p)
    np.testing.assert_allclose(normalize_adjacency(g.permuted(perm)), expected, rtol=0,
                               atol=1e-12)


def test_graph_file_round_trip(tmp_path):
    g = chain_graph(6, 0)
    write_graph_file(tmp_path / "g.txt", g)
    h = read_graph_file(tmp_path / "g.txt")
    assert h.num_joints == 6 and h.edges == g.edges


def test_graph_file_malformed(tmp_path):
    (tmp_path / "g.txt").write_text("3\n0 1 2\n")
    with pytest.raises(DataError):
        read_graph_file(tmp_path / "g.txt")
