"""Retriever contract plus the two bundled clients.

``InMemoryRetriever`` is a deliberately simple lexical index over a JSONL
corpus: the score of a document is the case-folded token-set overlap with
the query, ties break on ascending doc id, zero-score documents are
dropped. ``HttpRetriever`` speaks a one-endpoint wire contract
(POST /retrieve with ``{"query", "top_k"}``).
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass
from typing import Iterable, Protocol

import requests

_WORD = re.compile(r"\w+")


class EmptyQuery(ValueError):
    pass


class ServiceUnavailable(RuntimeError):
    pass


class CorpusParseError(ValueError):
    def __init__(self, line_no: int, detail: str):
        super().__init__(f"corpus line {line_no}: {detail}")
        self.line_no = line_no


@dataclass(frozen=True)
class RetrievedDoc:
    doc_id: str
    title: str
    contents: str
    score: float

    def to_json_dict(self) -> dict:
        return {"id": self.doc_id, "title": self.title, "contents": self.contents, "score": self.score}

    @classmethod
    def from_json_dict(cls, obj: dict) -> RetrievedDoc:
        return cls(
            doc_id=str(obj["id"]),
            title=str(obj.get("title", "")),
            contents=str(obj.get("contents", "")),
            score=float(obj.get("score", 0.0)),
        )


class Retriever(Protocol):
    def retrieve(self, query: str, top_k: int) -> list[RetrievedDoc]: ...


def tokenize(text: str) -> set[str]:
    """Case-folded token set used by the in-memory scorer."""
    return set(_WORD.findall(text.casefold()))


def parse_title(contents: str) -> str:
    """Title is the leading quoted span of the contents field, when present."""
    if contents.startswith('"'):
        end = contents.find('"', 1)
        if end > 0:
            return contents[1:end]
    return ""


def load_corpus(path: str) -> list[tuple[str, str, str]]:
    """Read a JSONL corpus of ``{"id", "contents"}`` rows.

    Returns (doc_id, title, contents) triples; malformed lines raise
    CorpusParseError with the line number.
    """
    docs: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as error:
                raise CorpusParseError(line_no, f"invalid JSON ({error.msg})") from error
            if not isinstance(obj, dict) or "id" not in obj or "contents" not in obj:
                raise CorpusParseError(line_no, "expected an object with 'id' and 'contents'")
            contents = str(obj["contents"])
            docs.append((str(obj["id"]), parse_title(contents), contents))
    return docs


class InMemoryRetriever:
    """Lexical index with deterministic ordering.

    score(doc) = |query tokens ∩ doc tokens|; results are sorted by score
    descending then doc id ascending, and zero-score documents never
    appear.
    """

    def __init__(self, docs: Iterable[tuple[str, str, str]]):
        self._docs = [(doc_id, title, contents, tokenize(contents)) for doc_id, title, contents in docs]

    @classmethod
    def from_corpus_file(cls, path: str) -> InMemoryRetriever:
        return cls(load_corpus(path))

    def __len__(self) -> int:
        return len(self._docs)

    def retrieve(self, query: str, top_k: int) -> list[RetrievedDoc]:
        if not query.strip():
            raise EmptyQuery("query must be non-empty")
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        query_tokens = tokenize(query)
        scored = []
        for doc_id, title, contents, doc_tokens in self._docs:
            score = len(query_tokens & doc_tokens)
            if score > 0:
                scored.append(RetrievedDoc(doc_id, title, contents, float(score)))
        scored.sort(key=lambda doc: (-doc.score, doc.doc_id))
        return scored[:top_k]


class HttpRetriever:
    """Client for a retrieval service exposing POST /retrieve."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        session: requests.Session | None = None,
    ):
        self._url = base_url.rstrip("/") + "/retrieve"
        self._timeout = timeout
        self._retries = retries
        self._backoff = backoff
        self._session = session or requests.Session()

    def retrieve(self, query: str, top_k: int) -> list[RetrievedDoc]:
        if not query.strip():
            raise EmptyQuery("query must be non-empty")
        payload = {"query": query, "top_k": top_k}
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            try:
                response = self._session.post(self._url, json=payload, timeout=self._timeout)
                response.raise_for_status()
                body = response.json()
                return [RetrievedDoc.from_json_dict(item) for item in body.get("results", [])]
            except (requests.RequestException, ValueError, KeyError) as error:
                last_error = error
                if attempt < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        raise ServiceUnavailable(f"retrieval service at {self._url} failed: {last_error}")


def build_retriever(spec: str) -> Retriever:
    """Build a retriever from a ``mem:<corpus-path>`` or ``http:<url>`` spec."""
    scheme, _, rest = spec.partition(":")
    if scheme == "mem" and rest:
        return InMemoryRetriever.from_corpus_file(rest)
    if scheme == "http" and rest:
        return HttpRetriever(rest)
    raise ValueError(f"unrecognized retriever spec {spec!r}; expected mem:<corpus-path> or http:<url>")
