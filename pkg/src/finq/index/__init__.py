from finq.index.bm25 import Bm25Index, DuplicateDocId, UnknownDocId
from finq.index.hnsw import DimensionMismatch, DuplicateChunkId, HnswIndex
from finq.index.store import (
    IndexParams,
    IndexStats,
    KnowledgeIndex,
    SnapshotIOError,
    StoredDocument,
    VersionMismatch,
    index_worker_loop,
    load_snapshot,
    save_snapshot,
)

__all__ = [
    "Bm25Index",
    "DimensionMismatch",
    "DuplicateChunkId",
    "DuplicateDocId",
    "HnswIndex",
    "IndexParams",
    "IndexStats",
    "KnowledgeIndex",
    "SnapshotIOError",
    "StoredDocument",
    "UnknownDocId",
    "VersionMismatch",
    "index_worker_loop",
    "load_snapshot",
    "save_snapshot",
]
