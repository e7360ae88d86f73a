"""The vector store: HNSW over chunks, BM25 over documents, plus a docstore.

Snapshot layout (all integers little-endian)::

    b"FINQIDX1" | version:u8 | 4 x (length:u64 | section bytes)

Sections, in order: docstore (UTF-8 JSON), BM25 postings, HNSW layers,
mappings (UTF-8 JSON). HNSW vectors are raw float32.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from finq.errors import FinqError
from finq.extract import FailureRecord
from finq.index.bm25 import Bm25Index
from finq.index.hnsw import DimensionMismatch, HnswIndex
from finq.models import EntityTag, IndexedDocument, format_timestamp
from finq.queues import ClosableQueue

logger = logging.getLogger(__name__)

MAGIC = b"FINQIDX1"
FORMAT_VERSION = 1
SNIPPET_CHARS = 240


class SnapshotIOError(FinqError):
    stage = "index"


class VersionMismatch(FinqError):
    stage = "index"


class RWLock:
    """Many readers or one writer; writers are not starved by new readers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(frozen=True)
class StoredDocument:
    object_id: str
    title: str
    body: str
    category: str
    timestamp: str
    metadata: Mapping[str, str]
    entities: tuple[EntityTag, ...]
    chunk_ids: tuple[str, ...]
    chunk_texts: tuple[str, ...]

    def snippet(self, chunk_id: str | None = None) -> str:
        text = self.body
        if chunk_id in self.chunk_ids:
            text = self.chunk_texts[self.chunk_ids.index(chunk_id)]
        text = " ".join(text.split())
        return text if len(text) <= SNIPPET_CHARS else text[: SNIPPET_CHARS - 1].rstrip() + "…"

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "title": self.title,
            "body": self.body,
            "category": self.category,
            "timestamp": self.timestamp,
            "metadata": dict(sorted(self.metadata.items())),
            "entities": [e.to_dict() for e in self.entities],
            "chunk_ids": list(self.chunk_ids),
            "chunk_texts": list(self.chunk_texts),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StoredDocument":
        return cls(
            object_id=d["object_id"],
            title=d["title"],
            body=d["body"],
            category=d["category"],
            timestamp=d["timestamp"],
            metadata=dict(d["metadata"]),
            entities=tuple(EntityTag.from_dict(e) for e in d["entities"]),
            chunk_ids=tuple(d["chunk_ids"]),
            chunk_texts=tuple(d["chunk_texts"]),
        )


@dataclass
class IndexParams:
    dims: int = 256
    M: int = 32
    ef_construction: int = 200
    ef_search: int = 64
    metric: str = "cosine"
    seed: int = 0
    k1: float = 1.2
    b: float = 0.75


class KnowledgeIndex:
    """HNSW + BM25 + docstore behind one reader/writer lock.

    Readers take :meth:`reading`; :meth:`upsert`, :meth:`remove` and
    :meth:`swap` take the write side, so queries see either the whole
    document or none of it.
    """

    def __init__(self, params: IndexParams | None = None):
        self.params = params or IndexParams()
        p = self.params
        self.hnsw = HnswIndex(p.dims, p.M, p.ef_construction, p.ef_search, p.metric, p.seed)
        self.bm25 = Bm25Index(p.k1, p.b)
        self.docs: dict[str, StoredDocument] = {}
        self.lock = RWLock()

    def __len__(self) -> int:
        return len(self.docs)

    def __contains__(self, object_id: str) -> bool:
        return object_id in self.docs

    @contextmanager
    def reading(self) -> Iterator["KnowledgeIndex"]:
        with self.lock.read():
            yield self

    def get(self, object_id: str) -> StoredDocument | None:
        return self.docs.get(object_id)

    def upsert(self, doc: IndexedDocument) -> bool:
        """Index ``doc``, replacing any earlier version. Returns True if replaced."""
        if doc.embeddings.shape[1] != self.params.dims:
            raise DimensionMismatch(f"{doc.object_id}: {doc.embeddings.shape[1]} dims, index has {self.params.dims}")
        with self.lock.write():
            replaced = doc.object_id in self.docs
            if replaced:
                self._remove_unlocked(doc.object_id)
            for chunk, vec in zip(doc.chunks, doc.embeddings):
                self.hnsw.insert(chunk.chunk_id, vec)
            self.bm25.add(doc.object_id, list(doc.keywords))
            self.docs[doc.object_id] = StoredDocument(
                object_id=doc.object_id,
                title=doc.title,
                body=doc.body,
                category=doc.category.value,
                timestamp=format_timestamp(doc.timestamp),
                metadata=dict(doc.metadata),
                entities=tuple(doc.entities),
                chunk_ids=tuple(c.chunk_id for c in doc.chunks),
                chunk_texts=tuple(c.text for c in doc.chunks),
            )
            return replaced

    def remove(self, object_id: str) -> None:
        with self.lock.write():
            self._remove_unlocked(object_id)

    def _remove_unlocked(self, object_id: str) -> None:
        stored = self.docs.pop(object_id)
        self.bm25.remove(object_id)
        for chunk_id in stored.chunk_ids:
            self.hnsw.delete(chunk_id)

    def best_chunk(self, object_id: str, query_vector: np.ndarray) -> tuple[str, float]:
        """Exact best-matching chunk of one document (dot product)."""
        stored = self.docs[object_id]
        sims = self.hnsw.vectors(stored.chunk_ids) @ np.asarray(query_vector, dtype=np.float32)
        best = int(np.argmax(sims))
        return stored.chunk_ids[best], float(sims[best])

    # -- snapshots ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self.lock.read():
            docstore = json.dumps(
                [self.docs[k].to_dict() for k in sorted(self.docs)], ensure_ascii=False, separators=(",", ":")
            ).encode("utf-8")
            mappings = json.dumps(
                {
                    "params": self.params.__dict__,
                    "doc_chunks": {k: list(self.docs[k].chunk_ids) for k in sorted(self.docs)},
                },
                separators=(",", ":"),
            ).encode("utf-8")
            sections = [docstore, self.bm25.to_bytes(), self.hnsw.to_bytes(), mappings]
        out = [MAGIC, bytes([FORMAT_VERSION])]
        for section in sections:
            out.append(struct.pack("<Q", len(section)))
            out.append(section)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "KnowledgeIndex":
        if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
            raise SnapshotIOError("not a snapshot file (bad magic or truncated header)")
        version = data[len(MAGIC)]
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"snapshot format version {version}, this build reads {FORMAT_VERSION}")
        pos = len(MAGIC) + 1
        sections = []
        for name in ("docstore", "bm25", "hnsw", "mappings"):
            if pos + 8 > len(data):
                raise SnapshotIOError(f"snapshot truncated before {name} section")
            (length,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + length > len(data):
                raise SnapshotIOError(f"snapshot truncated inside {name} section")
            sections.append(data[pos : pos + length])
            pos += length
        if pos != len(data):
            raise SnapshotIOError("trailing bytes after last section")
        try:
            mappings = json.loads(sections[3].decode("utf-8"))
            index = cls(IndexParams(**mappings["params"]))
            index.bm25 = Bm25Index.from_bytes(sections[1])
            index.hnsw = HnswIndex.from_bytes(sections[2])
            for d in json.loads(sections[0].decode("utf-8")):
                stored = StoredDocument.from_dict(d)
                index.docs[stored.object_id] = stored
        except (ValueError, KeyError, TypeError) as exc:
            raise SnapshotIOError(f"corrupt snapshot: {exc}") from exc
        if set(index.docs) != set(index.bm25.doc_lengths) or any(
            c not in index.hnsw for d in index.docs.values() for c in d.chunk_ids
        ):
            raise SnapshotIOError("snapshot sections disagree about indexed documents")
        return index

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(self.to_bytes())
            os.replace(tmp, path)
        except OSError as exc:
            raise SnapshotIOError(f"cannot write snapshot {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KnowledgeIndex":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise SnapshotIOError(f"cannot read snapshot {path}: {exc}") from exc
        return cls.from_bytes(data)

    def swap(self, other: "KnowledgeIndex") -> None:
        """Atomically replace this index's contents with ``other``'s."""
        with self.lock.write():
            self.params, self.hnsw, self.bm25, self.docs = other.params, other.hnsw, other.bm25, other.docs


def save_snapshot(index: KnowledgeIndex, path: str | os.PathLike) -> None:
    index.save(path)


def load_snapshot(path: str | os.PathLike) -> KnowledgeIndex:
    return KnowledgeIndex.load(path)


# -- worker -------------------------------------------------------------------


@dataclass
class IndexStats:
    indexed: int = 0
    replaced: int = 0
    failed: int = 0
    chunks: int = 0
    indexed_ids: list[str] = field(default_factory=list)
    failures: list[FailureRecord] = field(default_factory=list)


def index_worker_loop(
    index_queue: ClosableQueue[IndexedDocument],
    index: KnowledgeIndex,
    *,
    ordered: bool = False,
) -> IndexStats:
    """Apply documents to the index until the queue is closed and drained.

    With ``ordered=True`` documents are buffered and applied in object-id
    order once the queue closes, so the graph does not depend on how
    upstream workers interleaved.
    """
    stats = IndexStats()
    docs = index_queue if not ordered else sorted(index_queue, key=lambda d: d.object_id)
    for doc in docs:
        try:
            replaced = index.upsert(doc)
        except FinqError as exc:
            stats.failed += 1
            stats.failures.append(FailureRecord(doc.object_id, exc.stage, exc.code, exc.message))
            logger.warning("indexing failed for %s: %s", doc.object_id, exc.message)
            continue
        stats.indexed += 1
        stats.replaced += int(replaced)
        stats.chunks += len(doc.chunks)
        stats.indexed_ids.append(doc.object_id)
    return stats
