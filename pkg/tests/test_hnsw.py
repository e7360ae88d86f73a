from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finq.index.hnsw import DimensionMismatch, DuplicateChunkId, HnswIndex, UnknownChunkId


def exact_top_k(vectors, query, k):
    """Full-scan oracle: row indices ordered by descending dot product."""
    sims = [float(np.dot(v.astype(np.float64), query.astype(np.float64))) for v in vectors]
    return sorted(range(len(vectors)), key=lambda i: (-sims[i], i))[:k]


def unit_vectors(n, dims, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, dims)).astype(np.float32)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def build(n=100, dims=16, seed=1, **kw):
    vecs = unit_vectors(n, dims, seed)
    index = HnswIndex(dims, **kw)
    for i, v in enumerate(vecs):
        index.insert(f"c{i:04d}", v)
    return index, vecs


def test_singleton():
    index = HnswIndex(8)
    v = unit_vectors(1, 8, 0)[0]
    assert index.insert("only", v) == 0
    assert index.entry == 0
    (hit,) = index.search(v, 5)
    assert hit[0] == "only" and abs(hit[1] - 1.0) < 1e-6


def test_empty_search():
    assert HnswIndex(8).search(np.ones(8), 3) == []


def test_duplicate_and_unknown_ids():
    index, vecs = build(5)
    with pytest.raises(DuplicateChunkId):
        index.insert("c0000", vecs[0])
    with pytest.raises(UnknownChunkId):
        index.delete("nope")
    with pytest.raises(DimensionMismatch):
        index.search(np.ones(3), 1)


def test_layer0_connected_from_entry():
    index, _ = build(100, M=4)
    seen, todo = {index.entry}, deque([index.entry])
    while todo:
        node = todo.popleft()
        for nb in index.neighbors(node, 0):
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    assert len(seen) == 100


def test_identity_query_first():
    index, vecs = build(300, dims=32)
    for i in (0, 17, 299):
        cid, sim = index.search(vecs[i], 3)[0]
        assert cid == f"c{i:04d}" and abs(sim - 1.0) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 120), st.integers(2, 8), st.integers(0, 10_000))
def test_degree_bounds_after_every_insert(n, M, seed):
    vecs = unit_vectors(n, 8, seed)
    index = HnswIndex(8, M=M, ef_construction=20, seed=seed)
    for i, v in enumerate(vecs):
        index.insert(str(i), v)
        index.check_invariants()


def test_small_scale_recall_against_brute_force():
    index, vecs = build(2000, dims=32, seed=3, M=16)
    queries = unit_vectors(50, 32, 99)
    recall = []
    for q in queries:
        exact = {f"c{i:04d}" for i in exact_top_k(vecs, q, 10)}
        got = {cid for cid, _ in index.search(q, 10, ef=100)}
        recall.append(len(exact & got) / 10)
    assert np.mean(recall) >= 0.95


def test_exact_search_on_tiny_graph_equals_oracle():
    # With ef >= n the beam covers the whole (connected) graph.
    index, vecs = build(30, dims=8, seed=5)
    q = unit_vectors(1, 8, 6)[0]
    got = [cid for cid, _ in index.search(q, 5, ef=30)]
    assert got == [f"c{i:04d}" for i in exact_top_k(vecs, q, 5)]


def test_tombstones_hidden_and_rebuild():
    index, vecs = build(40)
    index.delete("c0003")
    assert all(cid != "c0003" for cid, _ in index.search(vecs[3], 40, ef=80))
    assert len(index) == 39 and index.node_count == 40
    for i in range(4, 25):
        index.delete(f"c{i:04d}")
    # the 21st tombstone (> half of 40) compacted the graph; one came after
    assert index.node_count == 19 and len(index) == 18
    index.check_invariants()
    hits = {cid for cid, _ in index.search(vecs[30], 18, ef=50)}
    assert hits == {f"c{i:04d}" for i in [0, 1, 2] + list(range(25, 40))}


def test_same_seed_same_graph():
    a, _ = build(200, seed=4, M=6)
    b, _ = build(200, seed=4, M=6)
    assert a.to_bytes() == b.to_bytes()


def test_round_trip_bytes():
    index, vecs = build(150, M=6)
    index.delete("c0010")
    clone = HnswIndex.from_bytes(index.to_bytes())
    assert clone.to_bytes() == index.to_bytes()
    for q in vecs[:20]:
        assert clone.search(q, 5) == index.search(q, 5)
    # inserting after a load continues deterministically
    extra = unit_vectors(1, 16, 77)[0]
    index.insert("new", extra)
    clone.insert("new", extra)
    assert clone.to_bytes() == index.to_bytes()


def test_truncated_bytes_rejected():
    index, _ = build(10)
    raw = index.to_bytes()
    for cut in (0, 5, len(raw) // 2, len(raw) - 1):
        with pytest.raises(ValueError):
            HnswIndex.from_bytes(raw[:cut])
    with pytest.raises(ValueError):
        HnswIndex.from_bytes(raw + b"\0")


def test_level_distribution_follows_ml():
    index = HnswIndex(4, M=16, seed=0)
    levels = np.array([index.random_level() for _ in range(20000)])
    # P(level >= 1) = 1/M
    assert abs((levels >= 1).mean() - 1 / 16) < 0.01
