import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sheaf_sim import graph as gr
from sheaf_sim.checks import random_connected_graph
from sheaf_sim.errors import DisconnectedSubgraph, EmptyModalitySet, InvalidEdge


def path3(sets=((0,), (0,), (0,))):
    return gr.build_graph(3, [(0, 1), (1, 2)], sets)


def test_minimal_graph():
    g = gr.build_graph(2, [(0, 1)], [{0}, {0}])
    assert g.edges == ((0, 1),)
    assert g.n_modalities == 1


def test_edges_are_normalised():
    g = gr.build_graph(3, [(1, 0), (0, 1), (2, 1)], [[0], [0], [0]])
    assert g.edges == ((0, 1), (1, 2))
    assert g.neighbors(1) == (0, 2)


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 3)], [(-1, 1)]])
def test_bad_edges_rejected(edges):
    with pytest.raises(InvalidEdge):
        gr.build_graph(3, edges, [[0]] * 3)


def test_empty_modality_set_rejected():
    with pytest.raises(EmptyModalitySet):
        gr.build_graph(2, [(0, 1)], [[0], []])


def test_modality_id_out_of_range():
    with pytest.raises(EmptyModalitySet):
        gr.build_graph(2, [(0, 1)], [[0], [2]], n_modalities=2)


def test_drone_topology_groups():
    g = gr.drone_topology()
    sizes = {ms: len(c) for ms, c in g.groups().items()}
    assert sizes == {(0,): 7, (1,): 7, (0, 1): 6}
    assert len(gr.mixing_matrices(g)) == 2


def test_path_subgraph_is_whole_path():
    sub = gr.modality_subgraph(path3(), 0)
    assert sub.members == (0, 1, 2)
    assert sub.edges == ((0, 1), (1, 2))


def test_disconnected_subgraph_names_components():
    g = path3(((0,), (1,), (0,)))
    with pytest.raises(DisconnectedSubgraph) as exc:
        gr.modality_subgraph(g, 0)
    assert "[0]" in str(exc.value) and "[2]" in str(exc.value)


def test_singleton_subgraph():
    g = gr.build_graph(2, [(0, 1)], [[0, 1], [0]])
    sub = gr.modality_subgraph(g, 1)
    assert sub.members == (0,) and sub.edges == ()
    w = gr.metropolis_weights(sub)
    np.testing.assert_array_equal(w.weights, [[1.0]])
    assert gr.spectral_gap(w) == 1.0


def test_path_weights_by_hand():
    w = gr.metropolis_weights(gr.modality_subgraph(path3(), 0)).weights
    expected = np.array([[2, 1, 0], [1, 1, 1], [0, 1, 2]]) / 3
    np.testing.assert_allclose(w, expected, atol=1e-15)


def test_k2_weights_and_gap():
    w = gr.metropolis_weights(gr.modality_subgraph(gr.build_graph(2, [(0, 1)], [[0], [0]]), 0))
    np.testing.assert_allclose(w.weights, [[0.5, 0.5], [0.5, 0.5]])
    assert gr.spectral_gap(w) == pytest.approx(1.0, abs=1e-12)


def test_path_gap_matches_eigendecomposition():
    w = gr.metropolis_weights(gr.modality_subgraph(path3(), 0))
    lam = np.sort(np.abs(np.linalg.eigvalsh(w.weights)))[::-1]
    assert gr.spectral_gap(w) == pytest.approx(1.0 - lam[1], abs=1e-9)
    # eigenvalues of the path matrix are 1, 2/3 and 0
    assert gr.spectral_gap(w) == pytest.approx(1.0 / 3.0, abs=1e-9)


def test_reference_graph_mixing():
    g = gr.reference_topology()
    assert g.is_connected()
    for k, w in gr.mixing_matrices(g).items():
        assert w.members == tuple(g.members(k))
        assert 0.0 < gr.spectral_gap(w) <= 1.0


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(1, 9))
    seed = draw(st.integers(0, 2**31 - 1))
    p = draw(st.floats(0.0, 0.8))
    edges = random_connected_graph(np.random.default_rng(seed), n, p)
    return gr.build_graph(n, edges, [[0]] * n)


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_mixing_matrix_invariants(g):
    w = gr.metropolis_weights(gr.modality_subgraph(g, 0))
    W = w.weights
    assert np.array_equal(W, W.T)
    assert np.all(W >= 0)
    assert np.max(np.abs(W.sum(axis=0) - 1)) <= 1e-12
    assert np.max(np.abs(W.sum(axis=1) - 1)) <= 1e-12
    allowed = np.eye(g.n_clients, dtype=bool)
    for i, j in g.edges:
        allowed[i, j] = allowed[j, i] = True
    assert not np.any((W != 0) & ~allowed)
    gap = gr.spectral_gap(w)
    assert gap > 0
    if g.n_clients > 1:
        lam = np.sort(np.abs(np.linalg.eigvalsh(W)))[::-1]
        assert gap == pytest.approx(1.0 - lam[1], abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(connected_graphs(), st.integers(0, 1000))
def test_gossip_preserves_mean(g, seed):
    W = gr.metropolis_weights(gr.modality_subgraph(g, 0)).weights
    X = np.random.default_rng(seed).standard_normal((5, g.n_clients))
    np.testing.assert_allclose((X @ W).mean(axis=1), X.mean(axis=1), atol=1e-12)
