"""Wires the pipelines together: config loading, batch ingest, queries."""

from __future__ import annotations

import json
import logging
import threading
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping

from finq.enrich import (
    EnrichStats,
    EmbeddingProvider,
    Gazetteer,
    LocalEmbeddingProvider,
    RemoteEmbeddingProvider,
    enrich_object,
    enrichment_worker_loop,
)
from finq.errors import FinqError, ValidationError
from finq.extract import (
    ChangeStatus,
    ExtractStats,
    ObjectMetastore,
    RetryPolicy,
    compute_hash,
    extract_worker_loop,
    validate_object,
)
from finq.frontier import Frontier, SelectorMatchesNothing
from finq.index.store import FORMAT_VERSION, IndexParams, IndexStats, KnowledgeIndex, index_worker_loop
from finq.models import Category, InvalidObject, KnowledgeObject, parse_timestamp
from finq.queues import ClosableQueue
from finq.retrieval import (
    FusionMethod,
    QueryDefaults,
    RetrievalSettings,
    Retriever,
)

logger = logging.getLogger(__name__)

QUEUE_SIZE = 256


class ConfigError(ValidationError):
    stage = "config"


_CONFIG_KEYS = {
    "frontier_config",
    "gazetteer",
    "provider",
    "dims",
    "chunk_size",
    "chunk_overlap",
    "hnsw",
    "bm25",
    "fusion",
    "snapshot",
    "metastore",
    "port",
    "seed",
    "workers",
    "retry",
}


@dataclass
class EngineConfig:
    """Everything an engine needs. Relative paths resolve against ``base_dir``."""

    frontier_config: Path
    gazetteer: Path
    snapshot: Path
    metastore: Path
    provider: str = "local_deterministic"
    provider_endpoint: str | None = None
    provider_model: str | None = None
    provider_token_limit: int = 8192
    dims: int = 256
    chunk_size: int = 512
    chunk_overlap: int = 64
    M: int = 32
    ef_construction: int = 200
    ef_search: int = 64
    k1: float = 1.2
    b: float = 0.75
    alpha: float = 0.5
    fusion: FusionMethod = FusionMethod.WEIGHTED
    rerank: bool = True
    rrf_c: float = 60.0
    port: int = 8080
    seed: int = 0
    extract_workers: int = 4
    enrich_workers: int = 2
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.provider not in ("local_deterministic", "remote_http"):
            raise ConfigError(f"provider must be local_deterministic or remote_http, got {self.provider!r}")
        if self.provider == "remote_http" and not (self.provider_endpoint and self.provider_model):
            raise ConfigError("remote_http provider needs endpoint and model_name")
        checks = [
            ("dims", self.dims >= 1),
            ("chunk_size", self.chunk_size >= 1),
            ("chunk_overlap", 0 <= self.chunk_overlap < self.chunk_size),
            ("hnsw.M", self.M >= 2),
            ("hnsw.ef_construction", self.ef_construction >= 1),
            ("hnsw.ef_search", self.ef_search >= 1),
            ("bm25.k1", self.k1 >= 0),
            ("bm25.b", 0.0 <= self.b <= 1.0),
            ("fusion.alpha", 0.0 <= self.alpha <= 1.0),
            ("fusion.rrf_c", self.rrf_c > 0),
            ("port", 0 <= self.port <= 65535),
            ("workers.extract", self.extract_workers >= 1),
            ("workers.enrich", self.enrich_workers >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name} is out of range")
        for name in ("frontier_config", "gazetteer"):
            path = getattr(self, name)
            if not path.is_file():
                raise ConfigError(f"{name}: no such file {path}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: Path | str = ".") -> "EngineConfig":
        base = Path(base_dir)
        unknown = sorted(set(raw) - _CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for required in ("frontier_config", "gazetteer", "snapshot"):
            if required not in raw:
                raise ConfigError(f"missing config key {required!r}")

        def path(value: str) -> Path:
            p = Path(value)
            return p if p.is_absolute() else base / p

        snapshot = path(raw["snapshot"])
        provider = raw.get("provider", {"kind": "local_deterministic"})
        if isinstance(provider, str):
            provider = {"kind": provider}
        hnsw, bm25, fusion = raw.get("hnsw", {}), raw.get("bm25", {}), raw.get("fusion", {})
        workers, retry = raw.get("workers", {}), raw.get("retry", {})
        try:
            return cls(
                frontier_config=path(raw["frontier_config"]),
                gazetteer=path(raw["gazetteer"]),
                snapshot=snapshot,
                metastore=path(raw["metastore"]) if "metastore" in raw else snapshot.with_suffix(".meta"),
                provider=provider.get("kind", "local_deterministic"),
                provider_endpoint=provider.get("endpoint"),
                provider_model=provider.get("model_name"),
                provider_token_limit=int(provider.get("token_limit", 8192)),
                dims=int(raw.get("dims", 256)),
                chunk_size=int(raw.get("chunk_size", 512)),
                chunk_overlap=int(raw.get("chunk_overlap", 64)),
                M=int(hnsw.get("M", 32)),
                ef_construction=int(hnsw.get("ef_construction", 200)),
                ef_search=int(hnsw.get("ef_search", 64)),
                k1=float(bm25.get("k1", 1.2)),
                b=float(bm25.get("b", 0.75)),
                alpha=float(fusion.get("alpha", 0.5)),
                fusion=FusionMethod(fusion.get("method", "weighted")),
                rerank=bool(fusion.get("rerank", True)),
                rrf_c=float(fusion.get("rrf_c", 60.0)),
                port=int(raw.get("port", 8080)),
                seed=int(raw.get("seed", 0)),
                extract_workers=int(workers.get("extract", 4)),
                enrich_workers=int(workers.get("enrich", 2)),
                retry=RetryPolicy(
                    max_retries=int(retry.get("max_retries", 3)),
                    base_delay=float(retry.get("base_delay_ms", 100.0)),
                    multiplier=float(retry.get("multiplier", 2.0)),
                ),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, FinqError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw, path.parent)

    @property
    def index_params(self) -> IndexParams:
        return IndexParams(
            dims=self.dims,
            M=self.M,
            ef_construction=self.ef_construction,
            ef_search=self.ef_search,
            seed=self.seed,
            k1=self.k1,
            b=self.b,
        )

    def make_provider(self) -> EmbeddingProvider:
        if self.provider == "remote_http":
            return RemoteEmbeddingProvider(
                self.provider_endpoint, self.provider_model, self.dims, self.provider_token_limit
            )
        return LocalEmbeddingProvider(self.dims, self.provider_token_limit)


@dataclass
class IngestReport:
    tasks: int = 0
    fetched: int = 0
    new: int = 0
    modified: int = 0
    unchanged: int = 0
    failed: int = 0
    chunks: int = 0
    entities: int = 0
    indexed: int = 0
    extract: ExtractStats = field(default_factory=ExtractStats, repr=False)
    enrich: EnrichStats = field(default_factory=EnrichStats, repr=False)
    index: IndexStats = field(default_factory=IndexStats, repr=False)
    notices: list[str] = field(default_factory=list, repr=False)

    COUNTS = ("tasks", "fetched", "new", "modified", "unchanged", "failed", "chunks", "entities", "indexed")

    def counts(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.COUNTS}

    def failures(self) -> list[dict]:
        records = self.extract.failures + self.enrich.failures + self.index.failures
        return [r.__dict__ for r in records]


class Engine:
    """One process holding the index, metastore, provider and gazetteer."""

    def __init__(
        self,
        config: EngineConfig,
        *,
        provider: EmbeddingProvider | None = None,
        sleep: Callable[[float], None] | None = None,
    ):
        self.config = config
        self.gazetteer = Gazetteer.from_file(config.gazetteer)
        self.provider = provider or config.make_provider()
        if self.provider.dims != config.dims:
            raise ConfigError(f"provider produces {self.provider.dims} dims, config says {config.dims}")
        self._sleep = sleep
        self._ingest_lock = threading.Lock()
        if config.snapshot.exists():
            self.index = KnowledgeIndex.load(config.snapshot)
            self.metastore = ObjectMetastore(config.metastore)
        else:
            self.index = KnowledgeIndex(config.index_params)
            if config.metastore.exists():
                # Hashes without the index they describe would mark everything Unchanged.
                logger.warning("no snapshot at %s; resetting metastore %s", config.snapshot, config.metastore)
                config.metastore.unlink()
            self.metastore = ObjectMetastore(config.metastore)
        self.retriever = Retriever(
            self.index,
            self.provider,
            RetrievalSettings(defaults=QueryDefaults(alpha=config.alpha, fusion=config.fusion, rerank=config.rerank)),
        )
        self.retriever.settings.rrf_c = config.rrf_c

    @classmethod
    def from_config_file(cls, path: str | Path, **kwargs) -> "Engine":
        return cls(EngineConfig.load(path), **kwargs)

    def _sleep_kw(self) -> dict:
        return {"sleep": self._sleep} if self._sleep is not None else {}

    # -- batch ingest ---------------------------------------------------------

    def ingest(self) -> IngestReport:
        """Run frontier -> extract -> enrich -> index once, then persist."""
        with self._ingest_lock:
            return self._ingest()

    def _ingest(self) -> IngestReport:
        cfg = self.config
        report = IngestReport()
        extract_q: ClosableQueue = ClosableQueue(name="extract")
        embed_q: ClosableQueue = ClosableQueue(QUEUE_SIZE, name="embed")
        index_q: ClosableQueue = ClosableQueue(name="index")

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SelectorMatchesNothing)
            report.tasks = Frontier(str(cfg.frontier_config)).run(extract_q)
        report.notices = [str(w.message) for w in caught if issubclass(w.category, SelectorMatchesNothing)]
        extract_q.close()

        extract_results: list[ExtractStats] = []
        enrich_results: list[EnrichStats] = []
        index_results: list[IndexStats] = []
        errors: list[BaseException] = []

        def run(target, sink, *args, **kwargs):
            def body():
                try:
                    sink.append(target(*args, **kwargs))
                except BaseException as exc:  # surfaced after join
                    errors.append(exc)
                    logger.exception("worker crashed")

            t = threading.Thread(target=body, daemon=True)
            t.start()
            return t

        extractors = [
            run(extract_worker_loop, extract_results, extract_q, self.metastore, embed_q, cfg.retry, **self._sleep_kw())
            for _ in range(cfg.extract_workers)
        ]
        enrichers = [
            run(
                enrichment_worker_loop,
                enrich_results,
                embed_q,
                index_q,
                self.provider,
                self.gazetteer,
                chunk_size=cfg.chunk_size,
                overlap=cfg.chunk_overlap,
                policy=cfg.retry,
                **self._sleep_kw(),
            )
            for _ in range(cfg.enrich_workers)
        ]
        indexer = run(index_worker_loop, index_results, index_q, self.index, ordered=True)

        for t in extractors:
            t.join()
        embed_q.close()
        for t in enrichers:
            t.join()
        index_q.close()
        indexer.join()
        if errors:
            raise errors[0]

        for s in extract_results:
            report.extract.merge(s)
        for s in enrich_results:
            report.enrich.merge(s)
        report.index = index_results[0]

        # An object that failed after its hash was recorded must be retried next run.
        for record in report.enrich.failures + report.index.failures:
            self.metastore.forget(record.object_id)

        ex = report.extract
        report.fetched = ex.fetched
        report.new = ex.new
        report.modified = ex.modified
        report.unchanged = ex.unchanged
        report.failed = ex.failed + ex.invalid + report.enrich.failed + report.index.failed
        report.chunks = report.index.chunks
        report.entities = report.enrich.entities
        report.indexed = report.index.indexed

        self.save()
        logger.info("ingest finished: %s", report.counts())
        return report

    def save(self) -> None:
        self.index.save(self.config.snapshot)
        self.metastore.flush()

    # -- incremental single-document ingest -----------------------------------

    def ingest_document(self, payload: Mapping[str, Any]) -> ChangeStatus:
        """Hash, enrich and index one pushed document; idempotent for identical input."""
        obj = self._object_from_payload(payload)
        with self._ingest_lock:
            previous = self.metastore.get(obj.object_id)
            status = self.metastore.check_and_record(obj.object_id, compute_hash(obj))
            if status is ChangeStatus.UNCHANGED:
                return status
            try:
                report = validate_object(obj)
                if not report.ok:
                    raise ValidationError(
                        f"{obj.object_id}: " + ",".join(f.value for f in report.failures),
                        stage="extract",
                        code="ValidationFailed",
                    )
                doc = enrich_object(
                    obj,
                    self.provider,
                    self.gazetteer,
                    chunk_size=self.config.chunk_size,
                    overlap=self.config.chunk_overlap,
                    policy=self.config.retry,
                    **self._sleep_kw(),
                )
                self.index.upsert(doc)
            except BaseException:
                self.metastore.restore(obj.object_id, previous)
                raise
            self.save()
            return status

    def _object_from_payload(self, payload: Mapping[str, Any]) -> KnowledgeObject:
        if not isinstance(payload, Mapping):
            raise ValidationError("document must be a JSON object", stage="validate", code="InvalidDocument")
        allowed = {"object_id", "title", "body", "category", "metadata", "timestamp"}
        unknown = sorted(set(payload) - allowed)
        if unknown:
            raise ValidationError(f"unknown document fields: {', '.join(unknown)}", code="InvalidDocument")
        for name in ("object_id", "title", "body"):
            if not isinstance(payload.get(name), str):
                raise ValidationError(f"{name} must be a string", code="InvalidDocument")
        metadata = payload.get("metadata") or {}
        if not isinstance(metadata, Mapping):
            raise ValidationError("metadata must be an object", code="InvalidDocument")
        object_id = payload["object_id"]
        try:
            if "timestamp" in payload:
                timestamp = parse_timestamp(str(payload["timestamp"]))
            elif object_id in self.index.docs:
                # Keep the stored timestamp so resubmitting the same text hashes identically.
                timestamp = parse_timestamp(self.index.docs[object_id].timestamp)
            else:
                timestamp = datetime.now(timezone.utc)
            return KnowledgeObject(
                object_id=object_id,
                title=payload["title"],
                body=payload["body"],
                category=Category(payload.get("category") or Category.DOCUMENT),
                timestamp=timestamp,
                metadata={str(k): str(v) for k, v in metadata.items()},
            )
        except InvalidObject:
            raise
        except ValueError as exc:
            raise ValidationError(str(exc), code="InvalidDocument") from exc

    # -- queries --------------------------------------------------------------

    def query(self, raw: str | Mapping) -> dict:
        return self.retriever.execute(raw)

    def health(self) -> dict:
        with self.index.reading() as index:
            return {"status": "ok", "indexed_docs": len(index.docs), "snapshot_version": FORMAT_VERSION}

    def close(self) -> None:
        self.metastore.close()
