"""Frontier pipeline: source configuration in, fetch tasks out.

The config document is JSON::

    {
      "schedule_seconds": 3600,
      "max_retries": 3,
      "sources": [
        {"source_id": "policies", "endpoint": "corpus/policies",
         "selectors": ["*.txt"], "mapping": {}, "extra_metadata": {}}
      ]
    }

Relative file endpoints resolve against the directory holding the config.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence
from urllib.parse import urlparse
from urllib.request import url2pathname

import requests

from finq.errors import FinqError, ValidationError
from finq.models import FetchTask, InvalidObject, SourceConfig, endpoint_scheme
from finq.queues import ClosableQueue

logger = logging.getLogger(__name__)

ExtractQueue = ClosableQueue[FetchTask]

_TOP_LEVEL_KEYS = {"schedule_seconds", "max_retries", "sources"}
_SOURCE_KEYS = {"source_id", "endpoint", "auth_env", "selectors", "mapping", "extra_metadata"}
_GLOB_CHARS = set("*?[")


class UnreadableLocation(FinqError):
    stage = "frontier"


class MalformedConfig(ValidationError):
    stage = "frontier"


class InvalidConfig(ValidationError):
    stage = "frontier"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FrontierBusy(FinqError):
    stage = "frontier"


class SelectorMatchesNothing(UserWarning):
    """A selector matched no objects at its source; the run continues."""


@dataclass(frozen=True)
class FrontierConfig:
    sources: tuple[SourceConfig, ...]
    schedule: float | None = None
    max_retries: int = 3

    def __post_init__(self):
        if not self.sources:
            raise InvalidConfig("sources", "at least one source is required")
        if self.schedule is not None and self.schedule < 1:
            raise InvalidConfig("schedule_seconds", "must be at least 1 second")
        if self.max_retries < 0:
            raise InvalidConfig("max_retries", "must be non-negative")
        seen = set()
        for i, src in enumerate(self.sources):
            if src.source_id in seen:
                raise InvalidConfig(f"sources[{i}].source_id", f"duplicate source_id {src.source_id!r}")
            seen.add(src.source_id)


def _read_location(location: str) -> tuple[bytes, Path | None]:
    scheme = endpoint_scheme(location)
    if scheme in ("http", "https"):
        try:
            resp = requests.get(location, timeout=30)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise UnreadableLocation(f"cannot fetch {location}: {exc}") from exc
        return resp.content, None
    path = file_path(location)
    try:
        return path.read_bytes(), path.parent
    except OSError as exc:
        raise UnreadableLocation(f"cannot read {path}: {exc}") from exc


def file_path(endpoint: str, base: Path | None = None) -> Path:
    """Filesystem path of a ``file://`` URI or bare path."""
    if endpoint.startswith("file:"):
        path = Path(url2pathname(urlparse(endpoint).path))
    else:
        path = Path(endpoint)
    if base is not None and not path.is_absolute():
        path = base / path
    return path


def parse_frontier_config(raw: bytes, base_dir: Path | None = None) -> FrontierConfig:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedConfig(f"config is not UTF-8 (byte {exc.start})") from exc
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise MalformedConfig("top level must be an object")
    unknown = sorted(set(doc) - _TOP_LEVEL_KEYS)
    if unknown:
        raise MalformedConfig(f"unknown top-level keys {unknown}")

    sources_raw = doc.get("sources")
    if not isinstance(sources_raw, list):
        raise InvalidConfig("sources", "must be an array")
    sources = []
    for i, src in enumerate(sources_raw):
        if not isinstance(src, dict):
            raise MalformedConfig(f"sources[{i}] must be an object")
        unknown = sorted(set(src) - _SOURCE_KEYS)
        if unknown:
            raise MalformedConfig(f"unknown keys {unknown} in sources[{i}]")
        for key in ("source_id", "endpoint"):
            if not isinstance(src.get(key), str):
                raise InvalidConfig(f"sources[{i}].{key}", "required string")
        selectors = src.get("selectors", [])
        if not isinstance(selectors, list) or not all(isinstance(s, str) and s for s in selectors):
            raise InvalidConfig(f"sources[{i}].selectors", "must be an array of non-empty strings")
        endpoint = src["endpoint"]
        if base_dir is not None and endpoint_scheme(endpoint) == "file":
            endpoint = str(file_path(endpoint, base_dir))
        try:
            sources.append(
                SourceConfig(
                    source_id=src["source_id"],
                    endpoint=endpoint,
                    auth=src.get("auth_env"),
                    object_selectors=tuple(selectors),
                    mapping=src.get("mapping") or {},
                    extra_metadata=src.get("extra_metadata") or {},
                )
            )
        except InvalidObject as exc:
            raise InvalidConfig(f"sources[{i}]", exc.message) from exc

    schedule = doc.get("schedule_seconds")
    max_retries = doc.get("max_retries", 3)
    if schedule is not None and not isinstance(schedule, (int, float)):
        raise InvalidConfig("schedule_seconds", "must be a number")
    if not isinstance(max_retries, int):
        raise InvalidConfig("max_retries", "must be an integer")
    return FrontierConfig(sources=tuple(sources), schedule=schedule, max_retries=max_retries)


def load_frontier_config(location: str) -> FrontierConfig:
    """Read and validate a frontier config from a file path or HTTP(S) URL."""
    raw, base_dir = _read_location(location)
    return parse_frontier_config(raw, base_dir)


def _match_selector(source: SourceConfig, selector: str) -> list[str]:
    if source.scheme != "file":
        # Remote sources cannot be listed; selectors are literal object refs.
        return [selector]
    root = file_path(source.endpoint)
    if _GLOB_CHARS & set(selector):
        return [p.relative_to(root).as_posix() for p in root.glob(selector) if p.is_file()]
    return [selector] if (root / selector).is_file() else []


def build_fetch_tasks(config: FrontierConfig) -> list[FetchTask]:
    """One task per (source, matched object), sources in config order, refs sorted.

    Selectors that match nothing emit a :class:`SelectorMatchesNothing` warning.
    """
    tasks = []
    for source in config.sources:
        refs: set[str] = set()
        for selector in source.object_selectors:
            matched = _match_selector(source, selector)
            if not matched:
                msg = f"selector {selector!r} of source {source.source_id!r} matched nothing"
                logger.warning(msg)
                warnings.warn(msg, SelectorMatchesNothing, stacklevel=2)
            refs.update(matched)
        for ref in sorted(refs):
            tasks.append(
                FetchTask(
                    task_id=f"{source.source_id}/{ref}",
                    source_id=source.source_id,
                    object_ref=ref,
                    endpoint=source.endpoint,
                    mapping=source.mapping,
                    auth_env=source.auth,
                    extra_metadata=source.extra_metadata,
                )
            )
    return tasks


def enqueue_tasks(tasks: Sequence[FetchTask], queue: ExtractQueue) -> int:
    for task in tasks:
        queue.put(task)
    return len(tasks)


class Frontier:
    """Runs the frontier for one config; concurrent runs are refused."""

    def __init__(self, location: str):
        self.location = location
        self._run_lock = threading.Lock()
        self.last_config: FrontierConfig | None = None

    def run(self, queue: ExtractQueue) -> int:
        if not self._run_lock.acquire(blocking=False):
            raise FrontierBusy(f"a frontier run over {self.location} is already in progress")
        try:
            config = load_frontier_config(self.location)
            self.last_config = config
            return enqueue_tasks(build_fetch_tasks(config), queue)
        finally:
            self._run_lock.release()

    def run_scheduled(
        self,
        make_queue: Callable[[], ExtractQueue],
        stop: threading.Event,
        on_run: Callable[[int], None] | None = None,
    ) -> None:
        """Rerun at the config's fixed interval until ``stop`` is set."""
        while not stop.is_set():
            count = self.run(make_queue())
            if on_run is not None:
                on_run(count)
            interval = self.last_config.schedule if self.last_config else None
            if interval is None:
                return
            stop.wait(interval)


def env_credential(name: str | None) -> str | None:
    return os.environ.get(name) if name else None
