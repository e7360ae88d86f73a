"""Tokenizers shared by indexing, embedding and query analysis."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from typing import Iterator

# Words, keeping hyphen/apostrophe compounds ("nvidia-powered", "bank's") whole.
_TERM_RE = re.compile(r"\w+(?:['\-]\w+)*")
# Plain alphanumeric runs; finer grained, used for entity matching.
_ATOM_RE = re.compile(r"\w+")
_WS_TOKEN_RE = re.compile(r"\S+")


def terms(text: str) -> list[str]:
    """Case-folded search terms of ``text``."""
    return [m.group(0).casefold() for m in _TERM_RE.finditer(text)]


def atoms(text: str) -> list[str]:
    return [m.group(0).casefold() for m in _ATOM_RE.finditer(text)]


def atom_spans(text: str) -> Iterator[tuple[str, int, int]]:
    """Yield ``(casefolded atom, byte_start, byte_end)`` over UTF-8 ``text``."""
    byte_pos = 0
    char_pos = 0
    for m in _ATOM_RE.finditer(text):
        byte_pos += len(text[char_pos : m.start()].encode("utf-8"))
        start = byte_pos
        byte_pos += len(m.group(0).encode("utf-8"))
        char_pos = m.end()
        yield m.group(0).casefold(), start, byte_pos


def whitespace_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _WS_TOKEN_RE.finditer(text)]


def whitespace_token_count(text: str) -> int:
    return len(text.split())


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    data = resources.files("finq").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip().casefold() for line in data.splitlines() if line.strip() and not line.startswith("#")
    )


def content_terms(text: str) -> list[str]:
    stop = stopwords()
    return [t for t in terms(text) if t not in stop]
