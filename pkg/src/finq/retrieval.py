"""Online retrieval: query validation, mode dispatch, fusion and re-ranking."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from finq.enrich import EmbeddingProvider
from finq.errors import FinqError, ProviderError, ValidationError
from finq.index.bm25 import Bm25Index
from finq.index.hnsw import HnswIndex
from finq.index.store import KnowledgeIndex
from finq.models import SearchResult
from finq.text import atoms, content_terms, stopwords, terms

logger = logging.getLogger(__name__)

MAX_QUERY_BYTES = 1024
MAX_K = 100
STAGES = ("validate", "embed", "search", "fuse", "rerank")


class SearchMode(str, Enum):
    KEYWORD = "keyword"
    SEMANTIC = "semantic"
    HYBRID = "hybrid"
    AUTO = "auto"


class FusionMethod(str, Enum):
    WEIGHTED = "weighted"
    RRF = "rrf"


class EmptyQuery(ValidationError):
    pass


class QueryTooLong(ValidationError):
    pass


class InvalidParameter(ValidationError):
    def __init__(self, field: str, bound: str):
        super().__init__(f"{field} {bound}")
        self.field = field
        self.bound = bound


class EmbeddingFailed(ProviderError):
    """Query embedding failed; wraps the provider error."""


@dataclass(frozen=True)
class Query:
    text: str
    mode: SearchMode = SearchMode.AUTO
    k: int = 10
    alpha: float = 0.5
    fusion: FusionMethod = FusionMethod.WEIGHTED
    rerank: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["fusion"] = self.fusion.value
        return d


@dataclass(frozen=True)
class QueryDefaults:
    k: int = 10
    alpha: float = 0.5
    fusion: FusionMethod = FusionMethod.WEIGHTED
    rerank: bool = True


_QUERY_KEYS = {"text", "mode", "k", "alpha", "fusion", "rerank"}


def _enum(cls, value, name):
    try:
        return cls(value)
    except ValueError:
        choices = "|".join(m.value for m in cls)
        raise InvalidParameter(name, f"must be one of {choices}, got {value!r}") from None


def validate_query(raw: str | Mapping, defaults: QueryDefaults = QueryDefaults()) -> Query:
    """Trim, range-check and default a raw query (a string or a request mapping)."""
    if isinstance(raw, str):
        raw = {"text": raw}
    unknown = sorted(set(raw) - _QUERY_KEYS)
    if unknown:
        raise InvalidParameter(unknown[0], "is not a query parameter")
    text = raw.get("text")
    if not isinstance(text, str):
        raise InvalidParameter("text", "must be a string")
    text = text.strip()
    if not text:
        raise EmptyQuery("query text is empty")
    if len(text.encode("utf-8")) > MAX_QUERY_BYTES:
        raise QueryTooLong(f"query is longer than {MAX_QUERY_BYTES} bytes")
    if not terms(text):
        raise EmptyQuery("query has no searchable words")

    mode = _enum(SearchMode, raw.get("mode") or SearchMode.AUTO, "mode")
    fusion = _enum(FusionMethod, raw.get("fusion") or defaults.fusion, "fusion")
    k = raw.get("k", defaults.k)
    if isinstance(k, bool) or not isinstance(k, int) or not 1 <= k <= MAX_K:
        raise InvalidParameter("k", f"must be an integer in [1, {MAX_K}]")
    alpha = raw.get("alpha", defaults.alpha)
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not 0.0 <= alpha <= 1.0:
        raise InvalidParameter("alpha", "must be a number in [0, 1]")
    rerank = raw.get("rerank", defaults.rerank)
    if not isinstance(rerank, bool):
        raise InvalidParameter("rerank", "must be a boolean")
    return Query(text=text, mode=mode, k=k, alpha=float(alpha), fusion=fusion, rerank=rerank)


# -- mode resolution ----------------------------------------------------------


@dataclass(frozen=True)
class ModeHeuristic:
    keyword_max_content_tokens: int = 3
    hybrid_over_tokens: int = 8
    interrogatives: frozenset[str] = frozenset({"what", "how", "why", "which", "who", "when", "where"})


def resolve_mode(query: Query, heuristic: ModeHeuristic = ModeHeuristic()) -> SearchMode:
    """Explicit modes pass through; ``auto`` is resolved from the query's shape.

    Short keyword-like queries go to keyword search, questions and long
    rambling queries to hybrid, and everything else to semantic.
    """
    if query.mode is not SearchMode.AUTO:
        return query.mode
    toks = terms(query.text)
    stop = stopwords()
    if sum(1 for t in toks if t not in stop) <= heuristic.keyword_max_content_tokens:
        return SearchMode.KEYWORD
    if heuristic.interrogatives.intersection(toks) or len(toks) > heuristic.hybrid_over_tokens:
        return SearchMode.HYBRID
    return SearchMode.SEMANTIC


# -- channels -----------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    score: float
    chunk_id: str | None = None


def over_fetch(k: int) -> int:
    return max(50, 3 * k)


def keyword_search(query: Query | str, bm25: Bm25Index, k_prime: int) -> list[Candidate]:
    text = query.text if isinstance(query, Query) else query
    q_terms = content_terms(text)
    if not q_terms:
        return []
    return [Candidate(d, s) for d, s in bm25.search(q_terms, k_prime)]


def doc_of_chunk(chunk_id: str) -> str:
    return chunk_id.rsplit("#", 1)[0]


def embed_query(text: str, provider: EmbeddingProvider) -> np.ndarray:
    try:
        return provider.embed(text)
    except FinqError as exc:
        raise EmbeddingFailed(f"{exc.code}: {exc.message}", stage="embed") from exc


def semantic_search(
    query: Query | str,
    provider: EmbeddingProvider,
    hnsw: HnswIndex,
    k_prime: int,
    *,
    query_vector: np.ndarray | None = None,
) -> list[Candidate]:
    """ANN search over chunks, collapsed to documents by best chunk."""
    if len(hnsw) == 0:
        return []
    if query_vector is None:
        query_vector = embed_query(query.text if isinstance(query, Query) else query, provider)
    ef = max(hnsw.ef_search, 2 * k_prime)
    best: dict[str, Candidate] = {}
    for chunk_id, sim in hnsw.search(query_vector, k_prime, ef):
        doc_id = doc_of_chunk(chunk_id)
        if doc_id not in best:  # hits arrive best-first
            best[doc_id] = Candidate(doc_id, _clamp_cos(sim), chunk_id)
    return sorted(best.values(), key=lambda c: (-c.score, c.doc_id))


def _clamp_cos(x: float) -> float:
    return min(1.0, max(-1.0, x))


# -- fusion -------------------------------------------------------------------


@dataclass(frozen=True)
class Fused:
    doc_id: str
    keyword_score: float = 0.0
    semantic_score: float = 0.0
    keyword_norm: float = 0.0
    semantic_norm: float = 0.0
    fused: float = 0.0
    chunk_id: str | None = None


def _as_candidates(items: Iterable) -> list[Candidate]:
    out = []
    for item in items:
        if isinstance(item, Candidate):
            out.append(item)
        else:
            out.append(Candidate(*item))
    return out


def min_max(scores: Mapping[str, float]) -> dict[str, float]:
    """Scale to [0, 1]; a constant (or single-entry) channel maps to 1.0."""
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return {d: 1.0 for d in scores}
    span = hi - lo
    return {d: (s - lo) / span for d, s in scores.items()}


def _top(fused: Iterable[Fused], k: int) -> list[Fused]:
    return sorted(fused, key=lambda f: (-f.fused, f.doc_id))[:k]


def fuse_weighted(keyword_results, semantic_results, alpha: float, k: int) -> list[Fused]:
    """``alpha * kw_norm + (1 - alpha) * sem_norm`` over the candidate union."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter("alpha", "must be a number in [0, 1]")
    kw = {c.doc_id: c for c in _as_candidates(keyword_results)}
    sem = {c.doc_id: c for c in _as_candidates(semantic_results)}
    kw_norm = min_max({d: c.score for d, c in kw.items()})
    sem_norm = min_max({d: c.score for d, c in sem.items()})
    fused = []
    for doc_id in kw.keys() | sem.keys():
        kn, sn = kw_norm.get(doc_id, 0.0), sem_norm.get(doc_id, 0.0)
        fused.append(
            Fused(
                doc_id=doc_id,
                keyword_score=kw[doc_id].score if doc_id in kw else 0.0,
                semantic_score=sem[doc_id].score if doc_id in sem else 0.0,
                keyword_norm=kn,
                semantic_norm=sn,
                fused=alpha * kn + (1.0 - alpha) * sn,
                chunk_id=sem[doc_id].chunk_id if doc_id in sem else None,
            )
        )
    return _top(fused, k)


def fuse_rrf(keyword_results, semantic_results, k: int, c: float = 60.0) -> list[Fused]:
    """Reciprocal rank fusion: ``sum(1 / (c + rank))`` over channels, ranks 1-based."""
    if c <= 0:
        raise InvalidParameter("c", "must be positive")
    kw = sorted(_as_candidates(keyword_results), key=lambda x: (-x.score, x.doc_id))
    sem = sorted(_as_candidates(semantic_results), key=lambda x: (-x.score, x.doc_id))
    kw_by = {x.doc_id: x for x in kw}
    sem_by = {x.doc_id: x for x in sem}
    scores: dict[str, float] = {}
    for channel in (kw, sem):
        for rank, cand in enumerate(channel, 1):
            scores[cand.doc_id] = scores.get(cand.doc_id, 0.0) + 1.0 / (c + rank)
    kw_norm = min_max({d: x.score for d, x in kw_by.items()})
    sem_norm = min_max({d: x.score for d, x in sem_by.items()})
    fused = [
        Fused(
            doc_id=d,
            keyword_score=kw_by[d].score if d in kw_by else 0.0,
            semantic_score=sem_by[d].score if d in sem_by else 0.0,
            keyword_norm=kw_norm.get(d, 0.0),
            semantic_norm=sem_norm.get(d, 0.0),
            fused=s,
            chunk_id=sem_by[d].chunk_id if d in sem_by else None,
        )
        for d, s in scores.items()
    ]
    return _top(fused, k)


def single_channel(results, keyword: bool) -> list[Fused]:
    """Wrap one channel's ranking as fused candidates (fused = normalized score)."""
    cands = _as_candidates(results)
    norm = min_max({c.doc_id: c.score for c in cands})
    out = []
    for c in cands:
        if keyword:
            out.append(Fused(c.doc_id, keyword_score=c.score, keyword_norm=norm[c.doc_id], fused=norm[c.doc_id]))
        else:
            out.append(
                Fused(
                    c.doc_id,
                    semantic_score=c.score,
                    semantic_norm=norm[c.doc_id],
                    fused=norm[c.doc_id],
                    chunk_id=c.chunk_id,
                )
            )
    return _top(out, len(out))


# -- re-ranking ---------------------------------------------------------------


@dataclass(frozen=True)
class RerankWeights:
    fused: float = 0.5
    cosine: float = 0.5
    entity_boost: float = 0.05
    entity_boost_cap: float = 0.15


def entity_boost(entity_surfaces: Iterable[str], query_atoms: set[str], weights: RerankWeights) -> float:
    matched = set()
    for surface in entity_surfaces:
        key = tuple(atoms(surface))
        if key and query_atoms.issuperset(key):
            matched.add(key)
    return min(len(matched) * weights.entity_boost, weights.entity_boost_cap)


def rerank(
    candidates: Sequence[Fused],
    query_vector: np.ndarray,
    index: KnowledgeIndex,
    k: int,
    *,
    query_text: str = "",
    weights: RerankWeights = RerankWeights(),
    warnings: list | None = None,
) -> list[Fused]:
    """Re-score candidates with exact best-chunk cosine and entity matches.

    ``final = w_f * fused_norm + w_c * cosine_norm + boost`` where both
    norms are min-max over the candidate set. Unknown doc ids are skipped
    and reported through ``warnings``.
    """
    known = []
    for cand in candidates:
        if cand.doc_id in index.docs:
            known.append(cand)
        else:
            logger.warning("rerank: unknown candidate %s", cand.doc_id)
            if warnings is not None:
                warnings.append({"code": "UnknownCandidate", "object_id": cand.doc_id})
    if not known:
        return []
    exact = {c.doc_id: index.best_chunk(c.doc_id, query_vector) for c in known}
    cos_norm = min_max({d: _clamp_cos(s) for d, (_, s) in exact.items()})
    fused_norm = min_max({c.doc_id: c.fused for c in known})
    q_atoms = set(atoms(query_text))
    out = []
    for cand in known:
        chunk_id, cos = exact[cand.doc_id]
        boost = entity_boost((e.surface for e in index.docs[cand.doc_id].entities), q_atoms, weights)
        final = weights.fused * fused_norm[cand.doc_id] + weights.cosine * cos_norm[cand.doc_id] + boost
        out.append(replace(cand, semantic_score=_clamp_cos(cos), chunk_id=chunk_id, fused=final))
    return _top(out, k)


# -- orchestration ------------------------------------------------------------


@dataclass
class RetrievalSettings:
    defaults: QueryDefaults = field(default_factory=QueryDefaults)
    heuristic: ModeHeuristic = field(default_factory=ModeHeuristic)
    weights: RerankWeights = field(default_factory=RerankWeights)
    rrf_c: float = 60.0


class Retriever:
    """Runs queries against a :class:`KnowledgeIndex` with one provider."""

    def __init__(self, index: KnowledgeIndex, provider: EmbeddingProvider, settings: RetrievalSettings | None = None):
        self.index = index
        self.provider = provider
        self.settings = settings or RetrievalSettings()

    def execute(self, raw: str | Mapping | Query) -> dict:
        return execute_query(raw, self)


def execute_query(raw: str | Mapping | Query, retriever: Retriever) -> dict:
    """validate -> resolve mode -> channel(s) -> fuse -> rerank -> payload.

    Raises a :class:`FinqError` subclass whose ``stage`` names the failing step.
    """
    settings = retriever.settings
    timings = dict.fromkeys(STAGES, 0.0)
    clock = time.perf_counter

    t0 = clock()
    query = raw if isinstance(raw, Query) else validate_query(raw, settings.defaults)
    mode = resolve_mode(query, settings.heuristic)
    timings["validate"] = _ms(clock() - t0)

    notices: list = []
    with retriever.index.reading() as index:
        k_prime = over_fetch(query.k)
        query_vector = None
        if mode in (SearchMode.SEMANTIC, SearchMode.HYBRID):
            t0 = clock()
            query_vector = embed_query(query.text, retriever.provider)
            timings["embed"] = _ms(clock() - t0)

        t0 = clock()
        kw_hits = keyword_search(query, index.bm25, k_prime) if mode in (SearchMode.KEYWORD, SearchMode.HYBRID) else []
        sem_hits = (
            semantic_search(query, retriever.provider, index.hnsw, k_prime, query_vector=query_vector)
            if mode in (SearchMode.SEMANTIC, SearchMode.HYBRID)
            else []
        )
        timings["search"] = _ms(clock() - t0)

        t0 = clock()
        pool = query.k if not query.rerank else k_prime
        if mode is SearchMode.HYBRID:
            if query.fusion is FusionMethod.RRF:
                fused = fuse_rrf(kw_hits, sem_hits, pool, settings.rrf_c)
            else:
                fused = fuse_weighted(kw_hits, sem_hits, query.alpha, pool)
        else:
            fused = single_channel(kw_hits if mode is SearchMode.KEYWORD else sem_hits, mode is SearchMode.KEYWORD)[:pool]
        timings["fuse"] = _ms(clock() - t0)

        if query.rerank and fused:
            if query_vector is None:
                t0 = clock()
                query_vector = embed_query(query.text, retriever.provider)
                timings["embed"] = _ms(clock() - t0)
            t0 = clock()
            fused = rerank(
                fused, query_vector, index, query.k, query_text=query.text, weights=settings.weights, warnings=notices
            )
            timings["rerank"] = _ms(clock() - t0)
        fused = fused[: query.k]

        results = []
        for rank, f in enumerate(fused, 1):
            stored = index.docs.get(f.doc_id)
            if stored is None:
                continue
            results.append(
                SearchResult(
                    object_id=f.doc_id,
                    chunk_id=f.chunk_id,
                    keyword_score=f.keyword_score,
                    semantic_score=f.semantic_score,
                    fused_score=f.fused,
                    rank=rank,
                    snippet=stored.snippet(f.chunk_id),
                    entities=stored.entities,
                )
            )

    summary: dict[str, set[str]] = {}
    for r in results:
        for e in r.entities:
            summary.setdefault(e.entity_type.value, set()).add(e.surface)
    payload = {
        "query": query.to_dict(),
        "resolved_mode": mode.value,
        "results": [r.to_dict() for r in results],
        "entities": {t: sorted(s) for t, s in sorted(summary.items())},
        "timings_ms": timings,
    }
    if notices:
        payload["warnings"] = notices
    return payload


def _ms(seconds: float) -> float:
    return round(seconds * 1000.0, 3)


def without_timings(payload: Mapping) -> dict:
    return {k: v for k, v in payload.items() if k != "timings_ms"}
