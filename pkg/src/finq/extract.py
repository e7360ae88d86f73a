"""Extract pipeline: fetch, hash, detect change, validate, forward.

Change detection is content based. Each object's SHA-256 over its canonical
form is kept in an :class:`ObjectMetastore`; only objects whose digest is new
or different travel on to enrichment.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from email.utils import parsedate_to_datetime
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping

import requests

from finq.errors import FinqError
from finq.frontier import ExtractQueue, env_credential, file_path
from finq.models import (
    CANONICAL_FIELDS,
    Category,
    FetchTask,
    InvalidObject,
    KnowledgeObject,
    MetastoreEntry,
    canonicalize,
    endpoint_scheme,
    format_timestamp,
    parse_timestamp,
)
from finq.queues import ClosableQueue, QueueClosed

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 10 * 1024 * 1024
MAX_DELAY_MS = 60_000.0


class FetchError(FinqError):
    stage = "extract"


class SourceUnavailable(FetchError):
    """Transient failure; the task is retried."""


class ObjectNotFound(FetchError):
    """Permanent failure; the task is dropped and recorded."""


class MappingError(FetchError):
    """The source record lacks a mapped field or carries a bad value."""


class MetastoreIOError(FinqError):
    stage = "extract"


class ChangeStatus(str, Enum):
    NEW = "New"
    MODIFIED = "Modified"
    UNCHANGED = "Unchanged"


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 100.0  # milliseconds
    multiplier: float = 2.0

    def __post_init__(self):
        if self.max_retries < 0 or self.multiplier < 1 or self.base_delay < 0:
            raise InvalidObject("retry policy needs max_retries >= 0, base_delay >= 0, multiplier >= 1")

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (0-based), in milliseconds."""
        return min(self.base_delay * self.multiplier**attempt, MAX_DELAY_MS)


def with_retries(
    fn: Callable[[], object],
    policy: RetryPolicy,
    retryable: type[BaseException] | tuple[type[BaseException], ...],
    sleep: Callable[[float], None] = time.sleep,
):
    """Call ``fn`` up to ``max_retries + 1`` times while it raises ``retryable``."""
    attempt = 0
    while True:
        try:
            return fn()
        except retryable:
            if attempt >= policy.max_retries:
                raise
            sleep(policy.delay(attempt) / 1000.0)
            attempt += 1


# -- fetching -----------------------------------------------------------------


def _http_get(url: str, token: str | None, session: requests.Session | None) -> tuple[bytes, str, datetime | None]:
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    getter = session.get if session is not None else requests.get
    try:
        resp = getter(url, headers=headers, timeout=30)
    except requests.RequestException as exc:
        raise SourceUnavailable(f"GET {url}: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise SourceUnavailable(f"GET {url}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ObjectNotFound(f"GET {url}: HTTP {resp.status_code}")
    modified = None
    if "Last-Modified" in resp.headers:
        try:
            modified = parsedate_to_datetime(resp.headers["Last-Modified"]).astimezone(timezone.utc)
        except (TypeError, ValueError):
            modified = None
    return resp.content, resp.headers.get("Content-Type", ""), modified


def _read_file(root: str, ref: str) -> tuple[bytes, str, datetime]:
    path = file_path(root) / ref
    try:
        data = path.read_bytes()
        mtime = datetime.fromtimestamp(path.stat().st_mtime, timezone.utc)
    except FileNotFoundError as exc:
        raise ObjectNotFound(f"{path} does not exist") from exc
    except IsADirectoryError as exc:
        raise ObjectNotFound(f"{path} is a directory") from exc
    except OSError as exc:
        raise SourceUnavailable(f"cannot read {path}: {exc}") from exc
    content_type = "application/json" if path.suffix.lower() == ".json" else "text/plain"
    return data, content_type, mtime


def _source_record(data: bytes, content_type: str) -> dict:
    text = data.decode("utf-8", errors="surrogateescape")
    if "json" in content_type:
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MappingError(f"JSON payload does not parse: {exc}") from exc
        if not isinstance(record, dict):
            raise MappingError("JSON payload must be an object")
        return record
    return {"body": text}


def map_record(record: Mapping, mapping: Mapping[str, str]) -> tuple[dict, dict]:
    """Rename source fields to canonical fields.

    Returns ``(canonical, leftover)`` where leftover holds the remaining
    scalar source fields, which become metadata.
    """
    canonical: dict = {}
    consumed = set()
    for source_field, target in mapping.items():
        if source_field not in record:
            raise MappingError(f"source record lacks mapped field {source_field!r}")
        canonical[target] = record[source_field]
        consumed.add(source_field)
    for name in CANONICAL_FIELDS:
        if name not in canonical and name in record and name not in consumed:
            canonical[name] = record[name]
            consumed.add(name)
    leftover = {
        k: v for k, v in record.items() if k not in consumed and isinstance(v, (str, int, float, bool))
    }
    return canonical, leftover


def fetch_object(
    task: FetchTask,
    *,
    now: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    session: requests.Session | None = None,
) -> KnowledgeObject:
    """Pull one object and shape it into a :class:`KnowledgeObject`.

    Missing canonical fields get defaults: title is the object ref, category
    is ``document``, and timestamp is the source modification time (file
    mtime or HTTP ``Last-Modified``) or else the fetch time.
    """
    scheme = endpoint_scheme(task.endpoint)
    if scheme in ("http", "https"):
        url = task.endpoint.rstrip("/") + "/" + task.object_ref.lstrip("/")
        data, content_type, modified = _http_get(url, env_credential(task.auth_env), session)
    elif scheme == "file":
        data, content_type, modified = _read_file(task.endpoint, task.object_ref)
    else:
        raise ObjectNotFound(f"unsupported endpoint scheme {scheme!r}")

    record = _source_record(data, content_type)
    canonical, leftover = map_record(record, task.mapping)
    metadata = {str(k): str(v) for k, v in leftover.items()}
    metadata.update(task.extra_metadata)

    body = canonical.get("body", "")
    if not isinstance(body, str):
        raise MappingError("body must be a string")
    try:
        timestamp = parse_timestamp(str(canonical["timestamp"])) if "timestamp" in canonical else None
    except ValueError as exc:
        raise MappingError(f"bad timestamp {canonical['timestamp']!r}") from exc
    try:
        return KnowledgeObject(
            object_id=task.object_id,
            title=str(canonical.get("title", task.object_ref)),
            body=body,
            category=canonical.get("category", Category.DOCUMENT),
            timestamp=timestamp or modified or now(),
            metadata=metadata,
        )
    except InvalidObject as exc:
        raise MappingError(exc.message) from exc


def compute_hash(obj: KnowledgeObject) -> bytes:
    return hashlib.sha256(canonicalize(obj)).digest()


# -- metastore ----------------------------------------------------------------


class ObjectMetastore:
    """Persistent ``object_id -> MetastoreEntry`` map.

    Backed by an append log of tab-separated records; :meth:`flush` compacts
    it to one line per entry. Later lines win on reload.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, MetastoreEntry] = {}
        self._lock = threading.Lock()
        self._log = None
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise MetastoreIOError(f"cannot read {self.path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            if not line:
                continue
            parts = line.split("\t")
            try:
                object_id, digest, first, last = parts
                entry = MetastoreEntry(object_id, bytes.fromhex(digest), parse_timestamp(first), parse_timestamp(last))
            except (ValueError, InvalidObject) as exc:
                raise MetastoreIOError(f"{self.path}:{lineno}: bad record") from exc
            self._entries[object_id] = entry

    @staticmethod
    def _record(entry: MetastoreEntry) -> str:
        return "\t".join(
            (
                entry.object_id,
                entry.content_hash.hex(),
                format_timestamp(entry.first_seen),
                format_timestamp(entry.last_indexed),
            )
        )

    def _append(self, entry: MetastoreEntry) -> None:
        if self.path is None:
            return
        try:
            if self._log is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._log = open(self.path, "a", encoding="utf-8")
            self._log.write(self._record(entry) + "\n")
            self._log.flush()
        except OSError as exc:
            raise MetastoreIOError(f"cannot append to {self.path}: {exc}") from exc

    def get(self, object_id: str) -> MetastoreEntry | None:
        with self._lock:
            return self._entries.get(object_id)

    def entries(self) -> dict[str, MetastoreEntry]:
        with self._lock:
            return dict(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def check_and_record(self, object_id: str, digest: bytes, now: datetime | None = None) -> ChangeStatus:
        now = now or datetime.now(timezone.utc)
        with self._lock:
            current = self._entries.get(object_id)
            if current is None:
                entry = MetastoreEntry(object_id, digest, now, now)
                status = ChangeStatus.NEW
            elif current.content_hash != digest:
                entry = MetastoreEntry(object_id, digest, current.first_seen, max(now, current.first_seen))
                status = ChangeStatus.MODIFIED
            else:
                return ChangeStatus.UNCHANGED
            self._append(entry)
            self._entries[object_id] = entry
            return status

    def forget(self, object_id: str) -> None:
        """Drop an entry in memory; persisted by the next :meth:`flush`."""
        with self._lock:
            self._entries.pop(object_id, None)

    def restore(self, object_id: str, previous: MetastoreEntry | None) -> None:
        """Roll an entry back to ``previous`` (None removes it) and persist."""
        with self._lock:
            if previous is None:
                self._entries.pop(object_id, None)
            else:
                self._entries[object_id] = previous
        self.flush()

    def flush(self) -> None:
        """Rewrite the backing file with exactly one line per current entry."""
        if self.path is None:
            return
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(tmp, "w", encoding="utf-8") as fh:
                    for object_id in sorted(self._entries):
                        fh.write(self._record(self._entries[object_id]) + "\n")
                os.replace(tmp, self.path)
            except OSError as exc:
                raise MetastoreIOError(f"cannot write {self.path}: {exc}") from exc

    def close(self) -> None:
        self.flush()


def check_and_record(metastore: ObjectMetastore, object_id: str, digest: bytes) -> ChangeStatus:
    return metastore.check_and_record(object_id, digest)


# -- validation ---------------------------------------------------------------


class ValidationFailure(str, Enum):
    EMPTY_BODY = "EmptyBody"
    BODY_TOO_LARGE = "BodyTooLarge"
    INVALID_UTF8 = "InvalidUtf8"
    FUTURE_TIMESTAMP = "FutureTimestamp"


@dataclass(frozen=True)
class ValidationReport:
    object_id: str
    failures: tuple[ValidationFailure, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.failures


def validate_object(
    obj: KnowledgeObject,
    *,
    max_body_bytes: int = MAX_BODY_BYTES,
    now: datetime | None = None,
) -> ValidationReport:
    failures = []
    if not obj.body.strip():
        failures.append(ValidationFailure.EMPTY_BODY)
    try:
        size = len(obj.body.encode("utf-8"))
    except UnicodeEncodeError:
        failures.append(ValidationFailure.INVALID_UTF8)
        size = len(obj.body.encode("utf-8", errors="surrogateescape"))
    if size > max_body_bytes:
        failures.append(ValidationFailure.BODY_TOO_LARGE)
    now = now or datetime.now(timezone.utc)
    if obj.timestamp > now + timedelta(hours=24):
        failures.append(ValidationFailure.FUTURE_TIMESTAMP)
    return ValidationReport(obj.object_id, tuple(failures))


# -- worker -------------------------------------------------------------------


@dataclass
class FailureRecord:
    object_id: str
    stage: str
    code: str
    message: str


@dataclass
class ExtractStats:
    fetched: int = 0
    new: int = 0
    modified: int = 0
    unchanged: int = 0
    invalid: int = 0
    failed: int = 0
    retries: int = 0
    pushed: int = 0
    pushed_ids: list[str] = field(default_factory=list)
    failures: list[FailureRecord] = field(default_factory=list)

    def merge(self, other: "ExtractStats") -> "ExtractStats":
        for name in ("fetched", "new", "modified", "unchanged", "invalid", "failed", "retries", "pushed"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.pushed_ids.extend(other.pushed_ids)
        self.failures.extend(other.failures)
        return self


def extract_worker_loop(
    queue: ExtractQueue,
    metastore: ObjectMetastore,
    embed_queue: ClosableQueue[KnowledgeObject],
    policy: RetryPolicy,
    *,
    fetch: Callable[[FetchTask], KnowledgeObject] = fetch_object,
    sleep: Callable[[float], None] = time.sleep,
    max_body_bytes: int = MAX_BODY_BYTES,
) -> ExtractStats:
    """Process fetch tasks until ``queue`` is closed and drained."""
    stats = ExtractStats()
    for task in queue:
        try:
            obj = _fetch_with_retry(task, policy, fetch, sleep, stats)
        except FetchError as exc:
            stats.failed += 1
            stats.failures.append(FailureRecord(task.object_id, exc.stage, exc.code, exc.message))
            logger.warning("dropping %s: %s", task.object_id, exc.message)
            continue
        stats.fetched += 1
        try:
            status = metastore.check_and_record(obj.object_id, compute_hash(obj))
        except MetastoreIOError as exc:
            stats.failed += 1
            stats.failures.append(FailureRecord(obj.object_id, exc.stage, exc.code, exc.message))
            continue
        if status is ChangeStatus.UNCHANGED:
            stats.unchanged += 1
            continue
        if status is ChangeStatus.NEW:
            stats.new += 1
        else:
            stats.modified += 1
        report = validate_object(obj, max_body_bytes=max_body_bytes)
        if not report.ok:
            stats.invalid += 1
            stats.failures.append(
                FailureRecord(obj.object_id, "extract", "ValidationFailed", ",".join(f.value for f in report.failures))
            )
            continue
        try:
            embed_queue.put(obj)
        except QueueClosed as exc:
            stats.failed += 1
            stats.failures.append(FailureRecord(obj.object_id, exc.stage, exc.code, exc.message))
            continue
        stats.pushed += 1
        stats.pushed_ids.append(obj.object_id)
    return stats


def _fetch_with_retry(task, policy, fetch, sleep, stats) -> KnowledgeObject:
    while True:
        try:
            return fetch(task)
        except SourceUnavailable:
            if task.attempt >= policy.max_retries:
                raise
            sleep(policy.delay(task.attempt) / 1000.0)
            stats.retries += 1
            task = replace(task, attempt=task.attempt + 1)
