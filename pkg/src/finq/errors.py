"""Exception hierarchy shared by the pipelines and the retrieval service."""

from __future__ import annotations


class FinqError(Exception):
    """Base class for every error raised by this package.

    ``stage`` names the pipeline or query stage that failed and ``code`` is a
    stable machine-readable identifier (defaults to the class name).
    """

    stage = "engine"

    def __init__(self, message: str = "", *, stage: str | None = None, code: str | None = None):
        super().__init__(message)
        self.message = message
        if stage is not None:
            self.stage = stage
        self.code = code or type(self).__name__

    def to_payload(self) -> dict:
        return {"error": {"stage": self.stage, "code": self.code, "message": self.message}}


class ValidationError(FinqError):
    """Input rejected before any work was done (maps to HTTP 400 / exit 1)."""

    stage = "validate"


class ProviderError(FinqError):
    """Embedding provider failure (maps to HTTP 503)."""

    stage = "embed"
