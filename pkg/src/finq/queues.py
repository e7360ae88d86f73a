"""Closable multi-producer/multi-consumer queues linking the pipelines."""

from __future__ import annotations

import queue
import threading
from typing import Generic, Iterator, TypeVar

from finq.errors import FinqError

T = TypeVar("T")


class QueueClosed(FinqError):
    """Raised on put() after close(), and on get() once a closed queue drains."""

    stage = "queue"


class ClosableQueue(Generic[T]):
    """A bounded FIFO that consumers can drain to completion.

    ``maxsize=0`` means unbounded. Producers call :meth:`close` when done;
    consumers keep receiving items until the queue is empty and then get
    :class:`QueueClosed`.
    """

    def __init__(self, maxsize: int = 0, name: str = "queue"):
        self.name = name
        self._q: queue.Queue[T] = queue.Queue(maxsize)
        self._closed = threading.Event()
        self._put_lock = threading.Lock()

    def put(self, item: T, timeout: float | None = None) -> None:
        while True:
            with self._put_lock:
                if self._closed.is_set():
                    raise QueueClosed(f"{self.name} is closed")
                try:
                    self._q.put(item, timeout=0.05)
                    return
                except queue.Full:
                    pass
            if timeout is not None:
                timeout -= 0.05
                if timeout <= 0:
                    raise queue.Full(self.name)

    def get(self, timeout: float | None = None) -> T:
        waited = 0.0
        while True:
            try:
                return self._q.get(timeout=0.05)
            except queue.Empty:
                if self._closed.is_set() and self._q.empty():
                    raise QueueClosed(f"{self.name} is closed and drained")
                waited += 0.05
                if timeout is not None and waited >= timeout:
                    raise

    def close(self) -> None:
        with self._put_lock:
            self._closed.set()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def qsize(self) -> int:
        return self._q.qsize()

    def __iter__(self) -> Iterator[T]:
        """Consume items until the queue is closed and empty."""
        while True:
            try:
                yield self.get()
            except QueueClosed:
                return
