import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_force_graph, make_units, random_units
from gcmtal.core import ActionUnit, Interval
from gcmtal.graphbuild import (
    CONTEXTUAL,
    EDGE_KINDS,
    SEMANTIC,
    SURROUNDING,
    DegenerateFeatureError,
    GraphParams,
    SparseAdjacency,
    UnitGraph,
    build_graph,
    build_graph_oracle,
    center_distance,
    compute_adjacency,
    dump_graph,
    row_softmax,
    semantic_candidates,
    tiou,
)


def test_tiou_and_center_distance_values():
    a, b = Interval(0, 10), Interval(5, 15)
    assert tiou(a, b) == pytest.approx(1 / 3)
    assert center_distance(a, b) == pytest.approx(5 / 15)
    # disjoint: union is the summed length
    assert tiou(Interval(0, 2), Interval(3, 5)) == 0.0
    assert center_distance(Interval(0, 2), Interval(3, 5)) == pytest.approx(3 / 4)
    assert tiou(a, a) == 1.0


@given(st.floats(0, 100), st.floats(0.1, 50), st.floats(0, 100), st.floats(0.1, 50))
def test_tiou_symmetric_and_bounded(s1, l1, s2, l2):
    a, b = Interval(s1, s1 + l1), Interval(s2, s2 + l2)
    r = tiou(a, b)
    assert 0.0 <= r <= 1.0
    assert r == tiou(b, a)
    assert center_distance(a, b) == center_distance(b, a)


def _kinds(units, **kw):
    g = build_graph(units, GraphParams(**kw))
    return {(i, j): k for i, j, k in g.edges}


def test_thresholds_are_strict():
    f = np.eye(3)
    # tIoU exactly 0.7 is not contextual
    u = make_units([0, 0, 50], [10, 7, 51], f)
    assert _kinds(u, semantic_l=0).get((0, 1)) is None
    # normalized center distance exactly 1 is not surrounding
    u = make_units([0, 2, 50], [1, 3, 51], f)
    assert _kinds(u, semantic_l=0).get((0, 1)) is None
    u = make_units([0, 1.9, 50], [1, 2.9, 51], f)
    assert _kinds(u, semantic_l=0)[(0, 1)] == SURROUNDING


def test_contextual_beats_semantic_and_overlap_blocks_semantic():
    f = np.array([[1.0, 0], [1.0, 0.01], [1.0, 0.02], [0, 1.0]])
    u = make_units([0, 0.5, 5, 100], [10, 10.5, 7, 101], f)
    k = _kinds(u, semantic_l=2)
    assert k[(0, 1)] == CONTEXTUAL  # also a top-2 cosine neighbor
    # 2 overlaps 0 with tIoU 0.2: neither temporal rule fires and semantic needs r = 0
    assert (0, 2) not in k
    # semantic edges are directed: 3 picks neighbors, they need not pick 3
    assert k[(3, 2)] == SEMANTIC or k[(3, 1)] == SEMANTIC
    assert (0, 3) not in k


def test_self_loop_is_contextual():
    u = make_units([0, 40], [1, 41], np.eye(2))
    assert _kinds(u)[(0, 0)] == CONTEXTUAL


def test_one_stage_mode_drops_contextual():
    rng = np.random.default_rng(1)
    u = random_units(rng, 40)
    g = build_graph(u, GraphParams(one_stage_mode=True))
    assert not g.edges_of_kind(CONTEXTUAL)
    assert g.edges_of_kind(SURROUNDING)


def test_edge_kind_ablation_removes_only_that_kind():
    rng = np.random.default_rng(2)
    u = random_units(rng, 60)
    full = build_graph(u)
    for kind in EDGE_KINDS:
        g = build_graph(u, GraphParams(edge_kinds=frozenset(EDGE_KINDS) - {kind}))
        assert not g.edges_of_kind(kind)
        for other in set(EDGE_KINDS) - {kind, SEMANTIC}:
            assert g.edges_of_kind(other) == full.edges_of_kind(other)


def test_semantic_candidates():
    f = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.7, 0.7]])
    assert semantic_candidates(f, 0, 2) == {1, 3}
    assert semantic_candidates(f, 0, 0) == set()
    with pytest.raises(ValueError):
        semantic_candidates(f, 0, 4)


def test_degenerate_feature_rejected():
    u = make_units([0, 5], [1, 6], [[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(DegenerateFeatureError):
        build_graph(u)


def test_empty_and_single():
    assert build_graph([]).edge_count == 0
    g = build_graph(make_units([0], [1], [[1.0]]))
    assert g.edges == [(0, 0, CONTEXTUAL)]


@st.composite
def instances(draw):
    n = draw(st.integers(1, 30))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    grid = draw(st.booleans())
    if grid:
        # integer boundaries and repeated features force exact ties
        starts = rng.integers(0, 20, n).astype(float)
        ends = starts + rng.integers(1, 6, n)
        feats = rng.integers(-1, 2, (n, 3)).astype(float)
        feats[np.all(feats == 0, axis=1), 0] = 1.0
    else:
        starts = rng.uniform(0, 3 * n, n)
        ends = starts + rng.uniform(0.1, 10, n)
        feats = rng.normal(size=(n, 5))
    params = dict(
        theta_ctx=draw(st.sampled_from([0.3, 0.5, 0.7, 0.9])),
        theta_sur=draw(st.sampled_from([0.5, 1.0, 2.0])),
        semantic_l=draw(st.integers(0, 12)),
    )
    kinds = draw(st.sets(st.sampled_from(EDGE_KINDS), min_size=1))
    return make_units(starts, ends, feats), params, kinds


@settings(max_examples=150, deadline=None)
@given(instances())
def test_fast_path_matches_brute_force(inst):
    units, params, kinds = inst
    g = build_graph(units, GraphParams(edge_kinds=frozenset(kinds), **params))
    ref = brute_force_graph(units, params["theta_ctx"], params["theta_sur"],
                            params["semantic_l"], kinds)
    assert g.edges == [(i, j, k) for i, j, k in ref]
    assert g == build_graph_oracle(units, GraphParams(edge_kinds=frozenset(kinds), **params))


@pytest.mark.parametrize("n", [300, 4500])
def test_fast_path_matches_oracle_large(n):
    # 4500 rows exercises the float32 screening path
    rng = np.random.default_rng(n)
    units = random_units(rng, n, d=16)
    fast = build_graph(units, workers=2)
    assert fast == build_graph_oracle(units)
    assert fast.digest() == build_graph(units).digest()


def test_adjacency_schemes():
    rng = np.random.default_rng(3)
    units = random_units(rng, 25, d=6)
    X = np.stack([u.feature for u in units])
    g = build_graph(units)
    src, dst = g.src, g.dst
    cos = compute_adjacency(g, X, "cosine")
    xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    np.testing.assert_allclose(cos.data, np.sum(xn[src] * xn[dst], axis=1), atol=1e-14)
    assert np.all(compute_adjacency(g, X, "uniform").data == 1.0)
    emb = compute_adjacency(g, X, "embed_cosine", (np.eye(6), np.eye(6)))
    np.testing.assert_allclose(emb.data, cos.data, atol=1e-14)
    W1, W2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    att = compute_adjacency(g, X, "attention", (W1, W2))
    dense = att.to_dense()
    for i in range(g.node_count):
        nb = g.neighbors(i)
        s = np.exp((X[i] @ W1) @ (X[nb] @ W2).T)
        np.testing.assert_allclose(dense[i, nb], s / s.sum(), rtol=1e-12)
    with pytest.raises(ValueError):
        compute_adjacency(g, X, "nope")
    with pytest.raises(ValueError):
        compute_adjacency(g, X[:-1], "cosine")


def test_row_softmax_matches_loop():
    rng = np.random.default_rng(4)
    indptr = np.array([0, 3, 3, 7])
    s = rng.normal(size=7) * 50
    out = row_softmax(s, indptr)
    for lo, hi in zip(indptr[:-1], indptr[1:]):
        if hi > lo:
            e = np.exp(s[lo:hi] - s[lo:hi].max())
            np.testing.assert_allclose(out[lo:hi], e / e.sum(), rtol=1e-13)


def test_sparse_adjacency_roundtrip():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(6, 6)) * (rng.random((6, 6)) < 0.4)
    a = SparseAdjacency.from_dense(d)
    np.testing.assert_array_equal(a.to_dense(), d)
    np.testing.assert_array_equal(a.to_scipy().toarray(), d)
    np.testing.assert_array_equal(SparseAdjacency.identity(4).to_dense(), np.eye(4))


def test_dump_graph_format():
    u = make_units([0, 1.5], [1, 2.5], np.eye(2))
    g = build_graph(u)
    text = dump_graph(g)
    assert text.splitlines()[0] == "0 0 contextual 1.0"
    assert all(len(line.split()) == 4 for line in text.splitlines())


def test_units_from_several_videos_rejected():
    u = [ActionUnit(0, "a", Interval(0, 1), np.ones(2)), ActionUnit(1, "b", Interval(0, 1), np.ones(2))]
    with pytest.raises(ValueError):
        build_graph(u)
