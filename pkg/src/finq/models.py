"""Domain types passed between the indexing pipelines and the retrieval service.

Every type here is an immutable value; workers can hand them across threads
without copying or locking.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from types import MappingProxyType
from typing import Mapping
from urllib.parse import urlparse

import numpy as np

from finq.errors import ValidationError

CANONICAL_FIELDS = frozenset({"id", "title", "body", "category", "timestamp"})
SUPPORTED_SCHEMES = frozenset({"file", "http", "https"})
DEFAULT_DIMS = 256

FIELD_SEP = b"\x1f"
RECORD_END = b"\x1e"

# C0 controls and DEL, minus tab/newline/carriage return.
_CONTROL_RE = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f]")
_ID_FORBIDDEN_RE = re.compile(r"[\x00-\x1f\x7f]")


class InvalidObject(ValidationError):
    """A domain value failed its constructor invariants."""


class Category(str, Enum):
    DOCUMENT = "document"
    METADATA_CATALOG = "metadata_catalog"
    ARTICLE = "article"
    NEWS_FEED = "news_feed"
    DATASET_RECORD = "dataset_record"


class EntityType(str, Enum):
    PERSON = "PERSON"
    ORGANIZATION = "ORGANIZATION"
    PLACE = "PLACE"
    FINANCIAL_SYSTEM = "FINANCIAL_SYSTEM"


def strip_control(text: str) -> str:
    return _CONTROL_RE.sub("", text)


def utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        raise InvalidObject("timestamp must be timezone-aware")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return utc(ts).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 instant; a trailing ``Z`` and naive values mean UTC."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _frozen_map(values: Mapping[str, str] | None) -> Mapping[str, str]:
    return MappingProxyType({str(k): str(v) for k, v in (values or {}).items()})


def _check_id(value: str, what: str) -> None:
    if not value:
        raise InvalidObject(f"{what} must be non-empty")
    if _ID_FORBIDDEN_RE.search(value):
        raise InvalidObject(f"{what} must not contain control characters: {value!r}")


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    endpoint: str
    auth: str | None = None
    object_selectors: tuple[str, ...] = ()
    mapping: Mapping[str, str] = field(default_factory=dict)
    extra_metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _check_id(self.source_id, "source_id")
        if self.scheme not in SUPPORTED_SCHEMES:
            raise InvalidObject(f"endpoint scheme {self.scheme!r} not in {sorted(SUPPORTED_SCHEMES)}")
        bad = sorted(set(self.mapping.values()) - CANONICAL_FIELDS)
        if bad:
            raise InvalidObject(f"mapping targets {bad} are not canonical fields {sorted(CANONICAL_FIELDS)}")
        object.__setattr__(self, "object_selectors", tuple(self.object_selectors))
        object.__setattr__(self, "mapping", _frozen_map(self.mapping))
        object.__setattr__(self, "extra_metadata", _frozen_map(self.extra_metadata))

    @property
    def scheme(self) -> str:
        return endpoint_scheme(self.endpoint)


def endpoint_scheme(endpoint: str) -> str:
    """Scheme of an endpoint; bare paths (including Windows-style) are ``file``."""
    parsed = urlparse(endpoint)
    if not parsed.scheme or len(parsed.scheme) == 1:
        return "file"
    return parsed.scheme.lower()


@dataclass(frozen=True)
class FetchTask:
    """One object to pull from one source.

    Carries the source endpoint and credential reference as well as the
    mapping so an extract worker never needs the full frontier config.
    """

    task_id: str
    source_id: str
    object_ref: str
    endpoint: str
    mapping: Mapping[str, str] = field(default_factory=dict)
    auth_env: str | None = None
    extra_metadata: Mapping[str, str] = field(default_factory=dict)
    attempt: int = 0

    def __post_init__(self):
        _check_id(self.object_ref, "object_ref")
        if self.attempt < 0:
            raise InvalidObject("attempt must be non-negative")
        object.__setattr__(self, "mapping", _frozen_map(self.mapping))
        object.__setattr__(self, "extra_metadata", _frozen_map(self.extra_metadata))

    @property
    def object_id(self) -> str:
        return f"{self.source_id}/{self.object_ref}"


@dataclass(frozen=True)
class KnowledgeObject:
    object_id: str
    title: str
    body: str
    category: Category = Category.DOCUMENT
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _check_id(self.object_id, "object_id")
        try:
            category = Category(self.category)
        except ValueError as exc:
            raise InvalidObject(f"unknown category {self.category!r}") from exc
        object.__setattr__(self, "category", category)
        object.__setattr__(self, "timestamp", utc(self.timestamp))
        object.__setattr__(self, "title", strip_control(self.title))
        object.__setattr__(self, "body", strip_control(self.body))
        object.__setattr__(
            self,
            "metadata",
            _frozen_map({strip_control(str(k)): strip_control(str(v)) for k, v in self.metadata.items()}),
        )


def canonicalize(obj: KnowledgeObject) -> bytes:
    """Stable byte serialization used as the content-hash input.

    Fields are written in a fixed order (object_id, title, body, category,
    timestamp, then metadata pairs sorted by key), separated by 0x1F and
    terminated by 0x1E. Control characters are stripped on construction, so
    the separators never occur inside a field.
    """
    parts = [
        obj.object_id,
        obj.title,
        obj.body,
        obj.category.value,
        format_timestamp(obj.timestamp),
    ]
    for key in sorted(obj.metadata):
        parts.append(key)
        parts.append(obj.metadata[key])
    encoded = [p.encode("utf-8", errors="surrogateescape") for p in parts]
    return FIELD_SEP.join(encoded) + RECORD_END


@dataclass(frozen=True)
class MetastoreEntry:
    object_id: str
    content_hash: bytes
    first_seen: datetime
    last_indexed: datetime

    def __post_init__(self):
        if len(self.content_hash) != 32:
            raise InvalidObject(f"content_hash must be 32 bytes, got {len(self.content_hash)}")
        if utc(self.last_indexed) < utc(self.first_seen):
            raise InvalidObject("last_indexed precedes first_seen")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: str
    token_count: int

    def __post_init__(self):
        if self.token_count <= 0:
            raise InvalidObject("token_count must be positive")

    @property
    def ordinal(self) -> int:
        return int(self.chunk_id.rsplit("#", 1)[1])


def as_embedding(values, dims: int | None = None) -> np.ndarray:
    """Validate and L2-normalize a vector into a float32 embedding.

    Raises:
        InvalidObject: wrong length, non-finite components or a zero vector.
    """
    vec = np.asarray(values, dtype=np.float64).ravel()
    if dims is not None and vec.shape[0] != dims:
        raise InvalidObject(f"embedding has {vec.shape[0]} dims, expected {dims}")
    if vec.shape[0] == 0 or not np.all(np.isfinite(vec)):
        raise InvalidObject("embedding has no components or non-finite components")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise InvalidObject("embedding is the zero vector")
    return (vec / norm).astype(np.float32)


@dataclass(frozen=True)
class EntityTag:
    surface: str
    entity_type: EntityType
    span: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "entity_type", EntityType(self.entity_type))
        start, end = self.span
        if not 0 <= start < end:
            raise InvalidObject(f"bad entity span {self.span}")
        object.__setattr__(self, "span", (int(start), int(end)))

    def check_against(self, body: str) -> bool:
        start, end = self.span
        raw = body.encode("utf-8")
        return end <= len(raw) and raw[start:end] == self.surface.encode("utf-8")

    def to_dict(self) -> dict:
        return {"surface": self.surface, "entity_type": self.entity_type.value, "span": list(self.span)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "EntityTag":
        return cls(data["surface"], EntityType(data["entity_type"]), tuple(data["span"]))


@dataclass(frozen=True, eq=False)
class IndexedDocument:
    """A fully enriched object ready for the index pipeline.

    ``embeddings`` holds one unit-norm row per chunk, in chunk order.
    """

    object_id: str
    title: str
    body: str
    category: Category
    timestamp: datetime
    metadata: Mapping[str, str]
    chunks: tuple[Chunk, ...]
    embeddings: np.ndarray
    entities: tuple[EntityTag, ...]
    keywords: tuple[str, ...]

    def __post_init__(self):
        if len(self.chunks) == 0 or self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.chunks):
            raise InvalidObject("every chunk needs exactly one embedding")


@dataclass(frozen=True)
class SearchResult:
    object_id: str
    chunk_id: str | None
    keyword_score: float
    semantic_score: float
    fused_score: float
    rank: int
    snippet: str
    entities: tuple[EntityTag, ...] = ()

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "object_id": self.object_id,
            "chunk_id": self.chunk_id,
            "keyword_score": self.keyword_score,
            "semantic_score": self.semantic_score,
            "fused_score": self.fused_score,
            "snippet": self.snippet,
            "entities": [e.to_dict() for e in self.entities],
        }
