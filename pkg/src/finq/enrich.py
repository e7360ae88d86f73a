"""Enrichment pipeline: chunking, embeddings and gazetteer entity tagging."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Protocol, runtime_checkable

import numpy as np
import requests

from finq.errors import FinqError, ProviderError, ValidationError
from finq.extract import FailureRecord, RetryPolicy
from finq.models import (
    DEFAULT_DIMS,
    Chunk,
    EntityTag,
    EntityType,
    IndexedDocument,
    InvalidObject,
    KnowledgeObject,
    as_embedding,
)
from finq.queues import ClosableQueue
from finq.text import atom_spans, atoms, terms, whitespace_spans, whitespace_token_count

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_LIMIT = 8192
MAX_SURFACE_TOKENS = 5

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class EmptyBody(ValidationError):
    stage = "enrich"


class EmptyText(ValidationError):
    stage = "embed"


class ProviderUnavailable(ProviderError):
    """Transient provider failure; callers may retry."""


class ProviderBadResponse(ProviderError):
    """The provider answered with something that is not a usable vector."""


class TokenLimitExceeded(ProviderError):
    """Input is longer than the provider accepts; re-chunk and retry."""


class GazetteerError(ValidationError):
    stage = "enrich"


# -- chunking -----------------------------------------------------------------


def chunk_text(body: str, chunk_size: int = 512, overlap: int = 64, *, object_id: str = "") -> list[Chunk]:
    """Split ``body`` into overlapping windows of whitespace tokens.

    Windows start every ``chunk_size - overlap`` tokens; the last window
    may be short. Each chunk's text is the exact body slice covering its
    tokens, so original spacing survives.
    """
    if not 0 <= overlap < chunk_size:
        raise ValueError("need chunk_size > overlap >= 0")
    spans = whitespace_spans(body)
    if not spans:
        raise EmptyBody("cannot chunk an empty body")
    stride = chunk_size - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + chunk_size, len(spans))
        text = body[spans[start][0] : spans[end - 1][1]]
        chunks.append(Chunk(f"{object_id}#{len(chunks)}", text, end - start))
        if end >= len(spans):
            return chunks
        start += stride


# -- embeddings ---------------------------------------------------------------


@lru_cache(maxsize=65536)
def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def embed_local(text: str, dims: int = DEFAULT_DIMS) -> np.ndarray:
    """Deterministic feature-hashing embedding.

    Each case-folded term adds +1 or -1 (bit 63 of its FNV-1a hash) at
    coordinate ``hash mod dims``. The counts are L2-normalized.
    """
    tokens = terms(text)
    if not tokens:
        raise EmptyText("cannot embed text without tokens")
    acc = np.zeros(dims, dtype=np.float64)
    for token in tokens:
        h = fnv1a_64(token.encode("utf-8"))
        acc[h % dims] += -1.0 if h >> 63 else 1.0
    if not acc.any():
        # Signed collisions cancelled out; fall back to unsigned counts.
        for token in tokens:
            acc[fnv1a_64(token.encode("utf-8")) % dims] += 1.0
    return as_embedding(acc, dims)


def embed_remote(
    text: str,
    endpoint: str,
    model_name: str,
    *,
    dims: int = DEFAULT_DIMS,
    token_limit: int = DEFAULT_TOKEN_LIMIT,
    session: requests.Session | None = None,
    timeout: float = 30.0,
) -> np.ndarray:
    """POST ``{"model", "input"}`` to ``endpoint`` and read ``{"embedding"}``."""
    if not text.strip():
        raise EmptyText("cannot embed empty text")
    n_tokens = whitespace_token_count(text)
    if n_tokens > token_limit:
        raise TokenLimitExceeded(f"{n_tokens} tokens exceeds limit {token_limit}")
    poster = session.post if session is not None else requests.post
    try:
        resp = poster(endpoint, json={"model": model_name, "input": text}, timeout=timeout)
    except requests.RequestException as exc:
        raise ProviderUnavailable(f"POST {endpoint}: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise ProviderUnavailable(f"POST {endpoint}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ProviderBadResponse(f"POST {endpoint}: HTTP {resp.status_code}")
    try:
        values = resp.json()["embedding"]
        if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
            raise TypeError("embedding must be an array of numbers")
        return as_embedding(values, dims)
    except (ValueError, KeyError, TypeError, InvalidObject) as exc:
        raise ProviderBadResponse(f"unusable embedding from {endpoint}: {exc}") from exc


@runtime_checkable
class EmbeddingProvider(Protocol):
    kind: str
    dims: int
    token_limit: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass
class LocalEmbeddingProvider:
    dims: int = DEFAULT_DIMS
    token_limit: int = DEFAULT_TOKEN_LIMIT
    kind: str = field(default="local_deterministic", init=False)

    def embed(self, text: str) -> np.ndarray:
        return embed_local(text, self.dims)


class RemoteEmbeddingProvider:
    kind = "remote_http"

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        dims: int = DEFAULT_DIMS,
        token_limit: int = DEFAULT_TOKEN_LIMIT,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.model_name = model_name
        self.dims = dims
        self.token_limit = token_limit
        self.timeout = timeout
        self._local = threading.local()

    @property
    def session(self) -> requests.Session:
        # requests.Session is not documented thread-safe; one pooled session per thread.
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = self._local.session = requests.Session()
        return sess

    def embed(self, text: str) -> np.ndarray:
        return embed_remote(
            text,
            self.endpoint,
            self.model_name,
            dims=self.dims,
            token_limit=self.token_limit,
            session=self.session,
            timeout=self.timeout,
        )


# -- entity tagging -----------------------------------------------------------


class Gazetteer:
    """Surface forms (case-folded atom sequences) mapped to entity types."""

    def __init__(self, entries: dict[tuple[str, ...], EntityType] | None = None):
        self.entries: dict[tuple[str, ...], EntityType] = {}
        for surface, etype in (entries or {}).items():
            self.add(" ".join(surface) if isinstance(surface, tuple) else surface, etype)

    def add(self, surface: str, entity_type: EntityType | str) -> None:
        key = tuple(atoms(surface))
        if not 1 <= len(key) <= MAX_SURFACE_TOKENS:
            raise GazetteerError(f"surface {surface!r} must have 1-{MAX_SURFACE_TOKENS} tokens")
        if key in self.entries:
            raise GazetteerError(f"duplicate surface {surface!r}")
        self.entries[key] = EntityType(entity_type)

    @property
    def max_len(self) -> int:
        return max((len(k) for k in self.entries), default=0)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Gazetteer":
        """Load ``surface<TAB>ENTITY_TYPE`` lines; ``#`` lines and blanks are skipped."""
        gaz = cls()
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as exc:
            raise GazetteerError(f"cannot read gazetteer {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GazetteerError(f"{path}:{lineno}: expected 'surface<TAB>ENTITY_TYPE'")
            surface, etype = parts[0].strip(), parts[1].strip()
            try:
                gaz.add(surface, EntityType(etype))
            except ValueError as exc:
                raise GazetteerError(f"{path}:{lineno}: unknown entity type {etype!r}") from exc
            except GazetteerError as exc:
                raise GazetteerError(f"{path}:{lineno}: {exc.message}") from exc
        return gaz


def tag_entities(body: str, gazetteer: Gazetteer) -> list[EntityTag]:
    """Case-insensitive gazetteer matching over the body's word atoms.

    Overlapping candidates are resolved longest first, then leftmost.
    Spans are UTF-8 byte offsets; surfaces keep the body's casing.
    """
    if not gazetteer.entries:
        return []
    toks = list(atom_spans(body))
    words = [t[0] for t in toks]
    candidates = []
    for i in range(len(words)):
        for n in range(1, min(gazetteer.max_len, len(words) - i) + 1):
            etype = gazetteer.entries.get(tuple(words[i : i + n]))
            if etype is not None:
                candidates.append((n, i, etype))
    candidates.sort(key=lambda c: (-c[0], c[1]))
    taken = [False] * len(words)
    accepted = []
    for n, i, etype in candidates:
        if any(taken[i : i + n]):
            continue
        taken[i : i + n] = [True] * n
        accepted.append((i, n, etype))
    accepted.sort()

    raw = body.encode("utf-8")
    tags = []
    for i, n, etype in accepted:
        start, end = toks[i][1], toks[i + n - 1][2]
        tags.append(EntityTag(raw[start:end].decode("utf-8"), etype, (start, end)))
    return tags


def keyword_terms(body: str, entities: list[EntityTag] | tuple[EntityTag, ...]) -> list[str]:
    """Body terms followed by the atoms of every entity surface."""
    out = terms(body)
    for tag in entities:
        out.extend(atoms(tag.surface))
    return out


# -- worker -------------------------------------------------------------------


@dataclass
class EnrichStats:
    enriched: int = 0
    failed: int = 0
    chunks: int = 0
    entities: int = 0
    failures: list[FailureRecord] = field(default_factory=list)

    def merge(self, other: "EnrichStats") -> "EnrichStats":
        self.enriched += other.enriched
        self.failed += other.failed
        self.chunks += other.chunks
        self.entities += other.entities
        self.failures.extend(other.failures)
        return self


def enrich_object(
    obj: KnowledgeObject,
    provider: EmbeddingProvider,
    gazetteer: Gazetteer,
    *,
    chunk_size: int = 512,
    overlap: int = 64,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> IndexedDocument:
    """Chunk, embed and tag one object. Raises on any chunk failure."""
    size = min(chunk_size, provider.token_limit)
    chunks = chunk_text(obj.body, size, min(overlap, size - 1), object_id=obj.object_id)
    vectors = np.empty((len(chunks), provider.dims), dtype=np.float32)
    for row, chunk in enumerate(chunks):
        vectors[row] = _embed_with_retry(provider, chunk.text, policy, sleep)
    entities = tag_entities(obj.body, gazetteer)
    return IndexedDocument(
        object_id=obj.object_id,
        title=obj.title,
        body=obj.body,
        category=obj.category,
        timestamp=obj.timestamp,
        metadata=obj.metadata,
        chunks=tuple(chunks),
        embeddings=vectors,
        entities=tuple(entities),
        keywords=tuple(keyword_terms(obj.body, entities)),
    )


def _embed_with_retry(provider, text, policy: RetryPolicy, sleep) -> np.ndarray:
    attempt = 0
    while True:
        try:
            return provider.embed(text)
        except ProviderUnavailable:
            if attempt >= policy.max_retries:
                raise
            sleep(policy.delay(attempt) / 1000.0)
            attempt += 1


def enrichment_worker_loop(
    embed_queue: ClosableQueue[KnowledgeObject],
    index_queue: ClosableQueue[IndexedDocument],
    provider: EmbeddingProvider,
    gazetteer: Gazetteer,
    *,
    chunk_size: int = 512,
    overlap: int = 64,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> EnrichStats:
    """Enrich objects until ``embed_queue`` is closed and drained.

    An object is forwarded only when every chunk embedded; failures are
    recorded and the loop moves on.
    """
    stats = EnrichStats()
    for obj in embed_queue:
        try:
            doc = enrich_object(
                obj, provider, gazetteer, chunk_size=chunk_size, overlap=overlap, policy=policy, sleep=sleep
            )
            index_queue.put(doc)
        except (FinqError, ValueError) as exc:
            stats.failed += 1
            stage = getattr(exc, "stage", "enrich")
            code = getattr(exc, "code", type(exc).__name__)
            stats.failures.append(FailureRecord(obj.object_id, stage, code, str(exc)))
            logger.warning("enrichment failed for %s: %s", obj.object_id, exc)
            continue
        stats.enriched += 1
        stats.chunks += len(doc.chunks)
        stats.entities += len(doc.entities)
    return stats
