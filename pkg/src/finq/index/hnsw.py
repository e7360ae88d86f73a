"""Hierarchical navigable small world graph for approximate k-NN search.

Graph storage is flat numpy arrays so the insert and search loops can run
under numba. ``links[l, n, :counts[l, n]]`` are node ``n``'s neighbours on
layer ``l``; upper layers only use the first ``M`` slots of each row.

Similarity is the dot product. Under the ``cosine`` metric vectors are
normalized on the way in, so dot equals cosine.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import threading

import numba
import numpy as np

from finq.errors import FinqError

MAX_LEVEL = 16
_TAG_LIMIT = 2**30


class DimensionMismatch(FinqError):
    stage = "index"


class DuplicateChunkId(FinqError):
    stage = "index"


class UnknownChunkId(FinqError):
    stage = "index"


@numba.njit(cache=True, fastmath=False)
def _dot(a, b):
    acc = np.float32(0.0)
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


@numba.njit(cache=True)
def _search_layer(q, entry_ids, ef, layer, links, counts, vectors, visited, tag):
    """Beam search on one layer; returns (ids, sims) sorted by similarity desc."""
    cand = [(np.float32(0.0), np.int64(0))]
    cand.pop()
    best = [(np.float32(0.0), np.int64(0))]
    best.pop()
    for e in entry_ids:
        if visited[e] == tag:
            continue
        visited[e] = tag
        s = _dot(vectors[e], q)
        heapq.heappush(cand, (-s, np.int64(e)))
        heapq.heappush(best, (s, np.int64(e)))
        if len(best) > ef:
            heapq.heappop(best)
    while len(cand) > 0:
        neg_s, c = heapq.heappop(cand)
        if len(best) >= ef and -neg_s < best[0][0]:
            break
        for j in range(counts[layer, c]):
            nb = links[layer, c, j]
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            s = _dot(vectors[nb], q)
            if len(best) < ef or s > best[0][0]:
                heapq.heappush(cand, (-s, np.int64(nb)))
                heapq.heappush(best, (s, np.int64(nb)))
                if len(best) > ef:
                    heapq.heappop(best)
    n = len(best)
    ids = np.empty(n, dtype=np.int64)
    sims = np.empty(n, dtype=np.float32)
    for i in range(n - 1, -1, -1):
        s, e = heapq.heappop(best)
        ids[i] = e
        sims[i] = s
    return ids, sims


@numba.njit(cache=True)
def _descend(q, entry, top_level, stop_level, links, counts, vectors, visited, tag):
    """Greedy ef=1 descent from ``top_level`` down to ``stop_level`` (exclusive)."""
    ep = np.array([entry], dtype=np.int64)
    for layer in range(top_level, stop_level, -1):
        ids, _ = _search_layer(q, ep, 1, layer, links, counts, vectors, visited, tag)
        tag += 1
        ep = ids[:1]
    return ep, tag


@numba.njit(cache=True)
def _add_link(src, dst, sim, layer, cap, links, counts, vectors):
    c = counts[layer, src]
    if c < cap:
        links[layer, src, c] = dst
        counts[layer, src] = c + 1
        return
    # Full: keep the ``cap`` closest of existing neighbours plus the new one.
    pool = np.empty(c + 1, dtype=np.int64)
    sims = np.empty(c + 1, dtype=np.float32)
    for j in range(c):
        pool[j] = links[layer, src, j]
        sims[j] = _dot(vectors[src], vectors[pool[j]])
    pool[c] = dst
    sims[c] = sim
    order = np.argsort(-sims, kind="mergesort")
    for j in range(cap):
        links[layer, src, j] = pool[order[j]]


@numba.njit(cache=True)
def _insert(node, level, entry, max_level, m, ef_construction, links, counts, vectors, visited, tag):
    q = vectors[node]
    ep, tag = _descend(q, entry, max_level, level, links, counts, vectors, visited, tag)
    for layer in range(min(level, max_level), -1, -1):
        ids, sims = _search_layer(q, ep, ef_construction, layer, links, counts, vectors, visited, tag)
        tag += 1
        cap = 2 * m if layer == 0 else m
        k = min(m, ids.shape[0])
        for j in range(k):
            links[layer, node, j] = ids[j]
        counts[layer, node] = k
        for j in range(k):
            _add_link(ids[j], node, sims[j], layer, cap, links, counts, vectors)
        ep = ids
    return tag


@numba.njit(cache=True)
def _knn(q, entry, max_level, ef, links, counts, vectors, visited, tag):
    ep, tag = _descend(q, entry, max_level, 0, links, counts, vectors, visited, tag)
    ids, sims = _search_layer(q, ep, ef, 0, links, counts, vectors, visited, tag)
    return ids, sims, tag + 1


class HnswIndex:
    """HNSW graph keyed by chunk id.

    Deletion tombstones a node: it is still traversed but never returned.
    Once tombstones outnumber live nodes the graph is rebuilt from the
    live vectors.
    """

    def __init__(
        self,
        dims: int,
        M: int = 32,
        ef_construction: int = 200,
        ef_search: int = 64,
        metric: str = "cosine",
        seed: int = 0,
        capacity: int = 1024,
    ):
        if metric not in ("cosine", "dot"):
            raise ValueError(f"unknown metric {metric!r}")
        if dims < 1 or M < 2 or ef_construction < 1 or ef_search < 1:
            raise ValueError("dims >= 1, M >= 2, ef_construction >= 1, ef_search >= 1 required")
        self.dims = dims
        self.M = M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.metric = metric
        self.seed = seed
        self.level_mult = 1.0 / math.log(M)
        self._rng = np.random.default_rng(seed)
        capacity = max(capacity, 1)
        self._vectors = np.zeros((capacity, dims), dtype=np.float32)
        self._levels = np.zeros(capacity, dtype=np.int32)
        self._deleted = np.zeros(capacity, dtype=np.bool_)
        self._links = np.zeros((1, capacity, 2 * M), dtype=np.int64)
        self._counts = np.zeros((1, capacity), dtype=np.int32)
        self._n = 0
        self._n_deleted = 0
        self.entry = -1
        self.max_level = -1
        self._chunk_ids: list[str] = []
        self._node_of: dict[str, int] = {}
        self._local = threading.local()

    # -- bookkeeping ----------------------------------------------------------

    def __len__(self) -> int:
        """Number of live (non-tombstoned) nodes."""
        return self._n - self._n_deleted

    @property
    def node_count(self) -> int:
        return self._n

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._node_of

    def _visited(self) -> tuple[np.ndarray, int]:
        buf = getattr(self._local, "visited", None)
        tag = getattr(self._local, "tag", 1)
        if buf is None or buf.shape[0] < self._vectors.shape[0] or tag > _TAG_LIMIT:
            buf = np.zeros(self._vectors.shape[0], dtype=np.int32)
            tag = 1
        self._local.visited = buf
        return buf, tag

    def _grow(self, need_nodes: int, need_levels: int) -> None:
        cap = self._vectors.shape[0]
        if need_nodes > cap:
            new_cap = max(need_nodes, cap * 2)
            self._vectors = _resized(self._vectors, new_cap)
            self._levels = _resized(self._levels, new_cap)
            self._deleted = _resized(self._deleted, new_cap)
            links = np.zeros((self._links.shape[0], new_cap, 2 * self.M), dtype=np.int64)
            links[:, :cap] = self._links
            counts = np.zeros((self._counts.shape[0], new_cap), dtype=np.int32)
            counts[:, :cap] = self._counts
            self._links, self._counts = links, counts
        if need_levels > self._links.shape[0]:
            extra = need_levels - self._links.shape[0]
            cap = self._vectors.shape[0]
            self._links = np.concatenate([self._links, np.zeros((extra, cap, 2 * self.M), dtype=np.int64)])
            self._counts = np.concatenate([self._counts, np.zeros((extra, cap), dtype=np.int32)])

    def _prepare(self, vector) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float32).ravel()
        if vec.shape[0] != self.dims:
            raise DimensionMismatch(f"vector has {vec.shape[0]} dims, index has {self.dims}")
        if self.metric == "cosine":
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = (vec / norm).astype(np.float32)
        return np.ascontiguousarray(vec)

    def random_level(self) -> int:
        u = 1.0 - self._rng.random()  # (0, 1]
        return min(int(math.floor(-math.log(u) * self.level_mult)), MAX_LEVEL)

    # -- mutation -------------------------------------------------------------

    def insert(self, chunk_id: str, vector) -> int:
        if chunk_id in self._node_of:
            raise DuplicateChunkId(f"chunk {chunk_id!r} already indexed")
        vec = self._prepare(vector)
        level = self.random_level()
        node = self._n
        self._grow(node + 1, level + 1)
        self._vectors[node] = vec
        self._levels[node] = level
        self._counts[:, node] = 0
        self._n += 1
        self._chunk_ids.append(chunk_id)
        self._node_of[chunk_id] = node
        if self.entry < 0:
            self.entry, self.max_level = node, level
            return node
        visited, tag = self._visited()
        tag = _insert(
            node, level, self.entry, self.max_level, self.M, self.ef_construction,
            self._links, self._counts, self._vectors, visited, tag,
        )
        self._local.tag = tag
        if level > self.max_level:
            self.entry, self.max_level = node, level
        return node

    def delete(self, chunk_id: str) -> None:
        node = self._node_of.pop(chunk_id, None)
        if node is None:
            raise UnknownChunkId(f"chunk {chunk_id!r} not indexed")
        self._deleted[node] = True
        self._n_deleted += 1
        if self._n_deleted * 2 > self._n:
            self.rebuild()

    def rebuild(self) -> None:
        """Re-insert live nodes, in their original order, into a fresh graph."""
        live = [(cid, self._vectors[n].copy()) for cid, n in sorted(self._node_of.items(), key=lambda kv: kv[1])]
        rng_state = self._rng.bit_generator.state
        self.__init__(
            self.dims, self.M, self.ef_construction, self.ef_search, self.metric, self.seed,
            capacity=max(len(live), 1),
        )
        self._rng.bit_generator.state = rng_state
        for cid, vec in live:
            self.insert(cid, vec)

    # -- queries --------------------------------------------------------------

    def search(self, query, k: int, ef: int | None = None) -> list[tuple[str, float]]:
        """Top-``k`` live chunks by similarity; ties broken by ascending chunk id."""
        q = self._prepare(query)
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.entry < 0 or len(self) == 0:
            return []
        ef = max(ef or self.ef_search, k)
        visited, tag = self._visited()
        ids, sims, tag = _knn(
            q, self.entry, self.max_level, ef, self._links, self._counts, self._vectors, visited, tag
        )
        self._local.tag = tag
        hits = [
            (self._chunk_ids[i], float(s)) for i, s in zip(ids.tolist(), sims.tolist()) if not self._deleted[i]
        ]
        hits.sort(key=lambda h: (-h[1], h[0]))
        return hits[:k]

    def vector(self, chunk_id: str) -> np.ndarray:
        node = self._node_of.get(chunk_id)
        if node is None:
            raise UnknownChunkId(f"chunk {chunk_id!r} not indexed")
        return self._vectors[node]

    def vectors(self, chunk_ids) -> np.ndarray:
        nodes = [self._node_of[c] for c in chunk_ids]
        return self._vectors[nodes]

    def live_items(self) -> list[tuple[str, np.ndarray]]:
        return [(cid, self._vectors[n]) for cid, n in sorted(self._node_of.items(), key=lambda kv: kv[1])]

    # -- structural checks ----------------------------------------------------

    def neighbors(self, node: int, layer: int) -> list[int]:
        return self._links[layer, node, : self._counts[layer, node]].tolist()

    def level_of(self, node: int) -> int:
        return int(self._levels[node])

    def check_invariants(self) -> None:
        """Raise AssertionError if degree bounds or edge validity are violated."""
        for node in range(self._n):
            for layer in range(self._links.shape[0]):
                nbrs = self.neighbors(node, layer)
                cap = 2 * self.M if layer == 0 else self.M
                assert len(nbrs) <= cap, f"node {node} layer {layer} has {len(nbrs)} > {cap} neighbours"
                if layer > self.level_of(node):
                    assert not nbrs, f"node {node} has links above its level"
                for nb in nbrs:
                    assert 0 <= nb < self._n, f"edge to unknown node {nb}"
                    assert nb != node, f"self loop at node {node}"
                    assert self.level_of(nb) >= layer, f"edge to node {nb} absent from layer {layer}"
        if self._n:
            assert self.level_of(self.entry) == self.max_level == int(self._levels[: self._n].max())

    # -- persistence ----------------------------------------------------------

    _HEADER = struct.Struct("<IIIIBqqqqq")

    def to_bytes(self) -> bytes:
        n = self._n
        levels = self._links.shape[0]
        meta = json.dumps(
            {"chunk_ids": self._chunk_ids, "rng": self._rng.bit_generator.state},
            separators=(",", ":"),
        ).encode("utf-8")
        header = self._HEADER.pack(
            self.dims, self.M, self.ef_construction, self.ef_search,
            0 if self.metric == "cosine" else 1,
            self.seed, n, self.entry, self.max_level, levels,
        )
        parts = [
            header,
            struct.pack("<Q", len(meta)),
            meta,
            self._vectors[:n].astype("<f4").tobytes(),
            self._levels[:n].astype("<i4").tobytes(),
            self._deleted[:n].astype(np.uint8).tobytes(),
            self._counts[:, :n].astype("<i4").tobytes(),
            self._links[:, :n].astype("<i8").tobytes(),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HnswIndex":
        """Inverse of :meth:`to_bytes`; raises ValueError on short or inconsistent input."""
        view = memoryview(data)
        hs = cls._HEADER.size
        if len(view) < hs + 8:
            raise ValueError("HNSW section truncated")
        dims, M, efc, efs, metric, seed, n, entry, max_level, levels = cls._HEADER.unpack(view[:hs])
        (meta_len,) = struct.unpack("<Q", view[hs : hs + 8])
        pos = hs + 8
        meta = json.loads(bytes(view[pos : pos + meta_len]).decode("utf-8"))
        pos += meta_len

        def take(count: int, dtype: str) -> np.ndarray:
            nonlocal pos
            size = count * np.dtype(dtype).itemsize
            if pos + size > len(view):
                raise ValueError("HNSW section truncated")
            arr = np.frombuffer(view[pos : pos + size], dtype=dtype).copy()
            pos += size
            return arr

        index = cls(dims, M, efc, efs, "cosine" if metric == 0 else "dot", seed, capacity=max(n, 1))
        index._grow(max(n, 1), max(levels, 1))
        index._vectors[:n] = take(n * dims, "<f4").reshape(n, dims)
        index._levels[:n] = take(n, "<i4")
        index._deleted[:n] = take(n, "u1").astype(bool)
        index._counts[:levels, :n] = take(levels * n, "<i4").reshape(levels, n)
        index._links[:levels, :n] = take(levels * n * 2 * M, "<i8").reshape(levels, n, 2 * M)
        if pos != len(view):
            raise ValueError("trailing bytes in HNSW section")
        if len(meta["chunk_ids"]) != n:
            raise ValueError("chunk id table does not match node count")
        index._n = n
        index.entry, index.max_level = entry, max_level
        index._chunk_ids = list(meta["chunk_ids"])
        index._node_of = {cid: i for i, cid in enumerate(index._chunk_ids) if not index._deleted[i]}
        index._n_deleted = int(index._deleted[:n].sum())
        index._rng.bit_generator.state = meta["rng"]
        return index


def _resized(arr: np.ndarray, rows: int) -> np.ndarray:
    out = np.zeros((rows,) + arr.shape[1:], dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out
