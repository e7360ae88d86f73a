"""Okapi BM25 over an in-memory inverted index."""

from __future__ import annotations

import bisect
import heapq
import math
import struct
from collections import Counter
from typing import Iterable, Sequence

from finq.errors import FinqError


class DuplicateDocId(FinqError):
    stage = "index"


class UnknownDocId(FinqError):
    stage = "index"


class Bm25Index:
    """Inverted index with Okapi BM25 scoring.

    Postings per term are kept as parallel lists sorted by doc id. IDF uses
    the non-negative form ``ln(1 + (N - df + 0.5) / (df + 0.5))``.
    """

    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self._post_ids: dict[str, list[str]] = {}
        self._post_tf: dict[str, list[int]] = {}
        self.doc_lengths: dict[str, int] = {}
        self._doc_terms: dict[str, Counter] = {}
        self._total_length = 0

    @property
    def N(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        return self._total_length / len(self.doc_lengths) if self.doc_lengths else 0.0

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.doc_lengths

    def __len__(self) -> int:
        return len(self.doc_lengths)

    def postings(self, term: str) -> list[tuple[str, int]]:
        return list(zip(self._post_ids.get(term, ()), self._post_tf.get(term, ())))

    def df(self, term: str) -> int:
        return len(self._post_ids.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def add(self, doc_id: str, terms: Sequence[str]) -> None:
        if doc_id in self.doc_lengths:
            raise DuplicateDocId(f"document {doc_id!r} already indexed")
        counts = Counter(terms)
        for term, tf in counts.items():
            ids = self._post_ids.setdefault(term, [])
            tfs = self._post_tf.setdefault(term, [])
            pos = bisect.bisect_left(ids, doc_id)
            ids.insert(pos, doc_id)
            tfs.insert(pos, tf)
        self.doc_lengths[doc_id] = len(terms)
        self._doc_terms[doc_id] = counts
        self._total_length += len(terms)

    def remove(self, doc_id: str) -> None:
        if doc_id not in self.doc_lengths:
            raise UnknownDocId(f"document {doc_id!r} not indexed")
        for term in self._doc_terms.pop(doc_id):
            ids = self._post_ids[term]
            pos = bisect.bisect_left(ids, doc_id)
            del ids[pos]
            del self._post_tf[term][pos]
            if not ids:
                del self._post_ids[term]
                del self._post_tf[term]
        self._total_length -= self.doc_lengths.pop(doc_id)

    def _term_part(self, tf: int, dl: int, avgdl: float) -> float:
        return tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / avgdl))

    def score(self, query_terms: Iterable[str], doc_id: str) -> float:
        if doc_id not in self.doc_lengths:
            raise UnknownDocId(f"document {doc_id!r} not indexed")
        dl = self.doc_lengths[doc_id]
        avgdl = self.avgdl
        tf_of = self._doc_terms[doc_id]
        total = 0.0
        for term, reps in Counter(query_terms).items():
            tf = tf_of.get(term, 0)
            if tf:
                total += reps * self.idf(term) * self._term_part(tf, dl, avgdl)
        return total

    def search(self, query_terms: Iterable[str], k: int) -> list[tuple[str, float]]:
        """Top-``k`` documents with positive score, ties by ascending doc id.

        A term repeated in the query contributes once per occurrence.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        avgdl = self.avgdl
        scores: dict[str, float] = {}
        # Same per-term expression and order as score(), so sums agree exactly.
        for term, reps in Counter(query_terms).items():
            ids = self._post_ids.get(term)
            if not ids:
                continue
            idf = self.idf(term)
            for doc_id, tf in zip(ids, self._post_tf[term]):
                scores[doc_id] = scores.get(doc_id, 0.0) + reps * idf * self._term_part(
                    tf, self.doc_lengths[doc_id], avgdl
                )
        top = heapq.nsmallest(k, ((-s, d) for d, s in scores.items() if s > 0.0))
        return [(d, -neg) for neg, d in top]

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        docs = sorted(self.doc_lengths)
        slot = {d: i for i, d in enumerate(docs)}
        out = [struct.pack("<ddQ", self.k1, self.b, len(docs))]
        for d in docs:
            raw = d.encode("utf-8")
            out.append(struct.pack("<Q", len(raw)) + raw + struct.pack("<Q", self.doc_lengths[d]))
        terms = sorted(self._post_ids)
        out.append(struct.pack("<Q", len(terms)))
        for term in terms:
            raw = term.encode("utf-8")
            ids = self._post_ids[term]
            out.append(struct.pack("<Q", len(raw)) + raw + struct.pack("<Q", len(ids)))
            out.append(b"".join(struct.pack("<QQ", slot[d], tf) for d, tf in zip(ids, self._post_tf[term])))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bm25Index":
        reader = _Reader(data)
        k1, b, n_docs = reader.unpack("<ddQ")
        index = cls(k1, b)
        docs = []
        for _ in range(n_docs):
            doc_id = reader.string()
            (length,) = reader.unpack("<Q")
            docs.append(doc_id)
            index.doc_lengths[doc_id] = length
            index._doc_terms[doc_id] = Counter()
            index._total_length += length
        (n_terms,) = reader.unpack("<Q")
        for _ in range(n_terms):
            term = reader.string()
            (n_post,) = reader.unpack("<Q")
            ids, tfs = [], []
            for _ in range(n_post):
                slot, tf = reader.unpack("<QQ")
                ids.append(docs[slot])
                tfs.append(tf)
                index._doc_terms[docs[slot]][term] = tf
            index._post_ids[term] = ids
            index._post_tf[term] = tfs
        reader.finish()
        return index


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError("section truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def string(self) -> str:
        (n,) = self.unpack("<Q")
        if self.pos + n > len(self.data):
            raise ValueError("section truncated")
        raw = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return raw.decode("utf-8")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise ValueError("trailing bytes in section")
