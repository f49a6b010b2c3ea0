import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgc.saliency import (DescriptorGraph, GraphError, SaliencyParams, brute_force_knn, build_graph,
                          compute_saliency, enhanced_similarity, exhaustive_query, graph_query, knn_recall,
                          read_graph, reverse_neighbors, saliency_from_indegree, write_graph)
from sgc.synthetic import descriptor_corpus

from test_descriptor import random_descriptor


@pytest.fixture(scope="module")
def corpus():
    descs, _ = descriptor_corpus(400, seed=3)
    return descs


@pytest.fixture(scope="module")
def graph(corpus):
    return build_graph(corpus, SaliencyParams(k=8))


def _invariants(g: DescriptorGraph):
    n, k = g.neighbors.shape
    for i in range(n):
        assert len(set(g.neighbors[i])) == k
        assert i not in g.neighbors[i]
    np.testing.assert_array_equal(g.indegree, np.bincount(g.neighbors.ravel(), minlength=n))
    assert g.indegree.sum() == n * k
    assert np.all((g.saliency > 0) & (g.saliency < 1))
    assert g.mean_indegree == pytest.approx(g.indegree[g.indegree > 0].mean())


def test_identical_descriptors_k2(rng):
    d = random_descriptor(rng)
    g = brute_force_knn([d, d, d], 2)
    for i in range(3):
        assert sorted(g.neighbors[i]) == sorted({0, 1, 2} - {i})


def test_complete_digraph(rng):
    descs = [random_descriptor(rng) for _ in range(6)]
    g = brute_force_knn(descs, 5)
    for i in range(6):
        assert sorted(g.neighbors[i]) == [j for j in range(6) if j != i]
    np.testing.assert_array_equal(g.indegree, 5)


def test_brute_force_matches_matrix_sort(rng):
    from sgc.descriptor import descriptor_similarity
    descs = [random_descriptor(rng) for _ in range(50)]
    g = brute_force_knn(descs, 5)
    S = np.array([[descriptor_similarity(a, b) for b in descs] for a in descs])
    for i in range(50):
        row = [(-S[i, j], j) for j in range(50) if j != i]
        expect = [j for _, j in sorted(row)[:5]]
        np.testing.assert_array_equal(g.neighbors[i], expect)
        np.testing.assert_allclose(g.scores[i], S[i, expect], rtol=1e-12)


def test_too_few_descriptors(rng):
    descs = [random_descriptor(rng) for _ in range(3)]
    with pytest.raises(GraphError):
        brute_force_knn(descs, 3)
    with pytest.raises(GraphError):
        build_graph(descs, SaliencyParams(k=3))


def test_build_invariants_and_determinism(corpus, graph):
    _invariants(graph)
    again = build_graph(corpus, SaliencyParams(k=8))
    np.testing.assert_array_equal(graph.neighbors, again.neighbors)
    np.testing.assert_array_equal(graph.scores, again.scores)


def test_build_recall_small(corpus, graph):
    exact = brute_force_knn(corpus, 8)
    assert knn_recall(graph, exact) >= 0.9


def test_recall_grows_with_iterations():
    means = []
    for iters in (0, 1, 4):
        r = []
        for seed in range(10):
            descs, _ = descriptor_corpus(120, seed=seed, n_scans=2)
            exact = brute_force_knn(descs, 6)
            r.append(knn_recall(build_graph(descs, SaliencyParams(k=6, build_iterations=iters, seed=seed)), exact))
        means.append(np.mean(r))
    assert means[0] <= means[1] <= means[2]


def test_reverse_neighbors_inverts_edges(graph):
    rev = reverse_neighbors(graph.neighbors, graph.scores, len(graph))
    for j in range(len(graph)):
        ins = rev[j][rev[j] >= 0]
        assert sorted(ins) == sorted(np.flatnonzero((graph.neighbors == j).any(axis=1)))
        # strongest edge first
        s = [graph.scores[i][list(graph.neighbors[i]).index(j)] for i in ins]
        assert all(a >= b for a, b in zip(s, s[1:]))


# -- saliency ----------------------------------------------------------------

def test_sigmoid_midpoint_and_tail():
    assert saliency_from_indegree([7.5], 7.5)[0] == 0.5
    assert saliency_from_indegree([27.5], 7.5)[0] == pytest.approx(1 / (1 + math.exp(20)), rel=1e-12)
    assert 1 / (1 + math.exp(20)) == pytest.approx(2.06e-9, rel=1e-2)


def test_fig4_shape_ordering():
    # 4 nodes, out-degree 3: everyone points at everyone
    nb = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    g = compute_saliency(DescriptorGraph(nb, np.zeros((4, 3)), ["a"] * 4))
    np.testing.assert_allclose(g.saliency, 0.5)
    # skewed: node 0 receives the most edges, node 3 the fewest
    nb = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    nb5 = np.vstack([nb, [[0, 1, 2], [0, 1, 2]]])
    g = compute_saliency(DescriptorGraph(nb5, np.zeros((6, 3)), ["a"] * 6))
    order_sal = np.argsort(-g.saliency[:4], kind="stable")
    order_deg = np.argsort(g.indegree[:4], kind="stable")
    np.testing.assert_array_equal(order_sal, order_deg)


@given(st.lists(st.integers(0, 60), min_size=2, max_size=30))
def test_saliency_strictly_decreasing(degrees):
    ib = 10.0
    s = saliency_from_indegree(sorted(set(degrees)), ib)
    assert np.all(np.diff(s) < 0) and np.all((s > 0) & (s < 1))


def test_enhanced_values():
    assert enhanced_similarity(42.0, 0.3, 0.0) == 42.0
    assert enhanced_similarity(100.0, 0.5, 0.2) == pytest.approx(87.055, abs=1e-3)
    assert enhanced_similarity(100.0, 1 - 1e-12, 0.2) == pytest.approx(100.0)


@given(st.floats(-1e3, 1e3), st.floats(1e-6, 1 - 1e-6), st.floats(0, 2))
def test_enhanced_preserves_sign(s, sali, alpha):
    e = enhanced_similarity(s, sali, alpha)
    assert np.sign(e) == np.sign(s)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=10), st.floats(1e-3, 1 - 1e-3))
def test_common_saliency_keeps_argmax(scores, sali):
    e = enhanced_similarity(np.array(scores), sali, 0.2)
    assert np.argmax(e) == np.argmax(scores)


# -- queries ---------------------------------------------------------------

def test_query_copy_finds_node(corpus, graph):
    rng = np.random.default_rng(0)
    hits = 0
    for qi, node in enumerate(rng.choice(len(corpus), 40, replace=False)):
        res = graph_query(graph, corpus[node], SaliencyParams(k=8), query_index=qi, use_saliency=False)
        hits += res[0].node == node
    assert hits / 40 >= 0.95


def test_query_deterministic(corpus, graph):
    a = graph_query(graph, corpus[5], query_index=3)
    b = graph_query(graph, corpus[5], query_index=3)
    assert a == b


def test_filter_single_scan_empty(rng):
    descs = [random_descriptor(rng) for _ in range(20)]
    g = build_graph(descs, SaliencyParams(k=4))
    assert graph_query(g, descs[0], exclude_scan="") == []
    assert exhaustive_query(g, descs[0], exclude_scan="") == []


def test_filter_never_returns_excluded(corpus, graph):
    ids = sorted(set(graph.scan_ids))
    for qi in range(10):
        res = graph_query(graph, corpus[qi * 7], query_index=qi, exclude_scan=ids[0])
        assert all(graph.scan_ids[h.node] != ids[0] for h in res)
        res = graph_query(graph, corpus[qi * 7], query_index=qi, allowed_scans=[ids[1]])
        assert all(graph.scan_ids[h.node] == ids[1] for h in res)


def test_exhaustive_ranking(corpus, graph):
    res = exhaustive_query(graph, corpus[11])
    raw = [h.raw for h in res]
    assert res[0].node == 11 and raw == sorted(raw, reverse=True)


def test_rerank_uses_enhanced(corpus, graph):
    res = graph_query(graph, corpus[2], query_index=1)
    enh = [h.enhanced for h in res]
    assert enh == sorted(enh, reverse=True)
    for h in res:
        assert h.enhanced == pytest.approx(graph.saliency[h.node] ** 0.2 * h.raw)


def test_graph_file_round_trip(tmp_path, corpus, graph):
    write_graph(tmp_path / "g.sgcg", graph)
    back = read_graph(tmp_path / "g.sgcg", corpus)
    np.testing.assert_array_equal(back.neighbors, graph.neighbors)
    np.testing.assert_array_equal(back.scores, graph.scores)
    np.testing.assert_array_equal(back.indegree, graph.indegree)
    np.testing.assert_array_equal(back.saliency, graph.saliency)
    assert back.scan_ids == graph.scan_ids
    assert graph_query(back, corpus[4], query_index=2) == graph_query(graph, corpus[4], query_index=2)


def test_graph_file_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(GraphError):
        read_graph(tmp_path / "bad")
