"""JSON-over-HTTP surface for an :class:`~finq.engine.Engine`."""

from __future__ import annotations

import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from finq.engine import Engine
from finq.errors import FinqError, ProviderError, ValidationError

logger = logging.getLogger(__name__)

MAX_REQUEST_BYTES = 16 * 1024 * 1024


def status_for(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return HTTPStatus.BAD_REQUEST
    if isinstance(exc, ProviderError):
        return HTTPStatus.SERVICE_UNAVAILABLE
    return HTTPStatus.INTERNAL_SERVER_ERROR


def error_payload(exc: BaseException) -> dict:
    if isinstance(exc, FinqError):
        return exc.to_payload()
    return {"error": {"stage": "engine", "code": type(exc).__name__, "message": str(exc)}}


class _Handler(BaseHTTPRequestHandler):
    server: "FinqServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_REQUEST_BYTES:
            raise ValidationError("request body too large", stage="validate", code="RequestTooLarge")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"request body is not JSON: {exc}", stage="validate", code="MalformedJson") from exc

    def _dispatch(self, handler) -> None:
        try:
            self._send(HTTPStatus.OK, handler())
        except Exception as exc:
            status = status_for(exc)
            if status == HTTPStatus.INTERNAL_SERVER_ERROR:
                logger.exception("request failed")
            self._send(status, error_payload(exc))

    def do_GET(self):
        if self.path == "/health":
            self._dispatch(self.server.engine.health)
        else:
            self._send(HTTPStatus.NOT_FOUND, _not_found(self.path))

    def do_POST(self):
        engine = self.server.engine
        if self.path == "/query":
            self._dispatch(lambda: engine.query(self._require_object(self._read_json())))
        elif self.path == "/documents":
            self._dispatch(
                lambda: {"status": engine.ingest_document(self._require_object(self._read_json())).value}
            )
        else:
            self._send(HTTPStatus.NOT_FOUND, _not_found(self.path))

    @staticmethod
    def _require_object(body):
        if not isinstance(body, dict):
            raise ValidationError("request body must be a JSON object", stage="validate", code="MalformedJson")
        return body


def _not_found(path: str) -> dict:
    return {"error": {"stage": "http", "code": "NotFound", "message": f"no route for {path}"}}


class FinqServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, engine: Engine, host: str = "127.0.0.1", port: int = 8080):
        self.engine = engine
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        """Serve on a daemon thread (used by tests and embedding apps)."""
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve(engine: Engine, host: str = "127.0.0.1", port: int | None = None) -> None:
    server = FinqServer(engine, host, engine.config.port if port is None else port)
    logger.info("listening on http://%s:%d", host, server.port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
