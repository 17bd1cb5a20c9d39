"""Model-backed capabilities (embedding, summarization, merge) behind one interface.

:class:`StubServices` is fully deterministic and dependency-free; it is what the
reference store and the benchmark use.  :class:`RemoteServices` speaks a small
JSON-over-HTTP contract for plugging in real models:

    POST {base}/embed      {"text": str}                                  -> {"vector": [float, ...]}
    POST {base}/summarize  {"texts": [str], "focus": str|null, "max_tokens": int} -> {"text": str}
    POST {base}/merge      {"texts": [str]}                               -> {"text": str}
    GET  {base}/descriptor                                                -> {"name": str, "dimension": int, "version": str}
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol, Sequence


class ServiceError(ValueError):
    code = "E_SERVICE"


class EmptyText(ServiceError):
    code = "E_EMPTY_TEXT"


class EmptyInput(ServiceError):
    code = "E_EMPTY_INPUT"


class EmptyBudget(ServiceError):
    code = "E_EMPTY_BUDGET"


class TooFew(ServiceError):
    code = "E_TOO_FEW"


@dataclass(frozen=True)
class Descriptor:
    name: str
    dimension: int
    version: str


class ModelServices(Protocol):
    descriptor: Descriptor

    def embed(self, text: str) -> list[float]: ...

    def summarize(self, texts: Sequence[str], focus: str | None, max_tokens: int) -> str: ...

    def merge_text(self, texts: Sequence[str]) -> str: ...


# ---------------------------------------------------------------------------
# text helpers shared with the store
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\w+(?:[-:.']\w+)*")
_SENTENCE_END = re.compile(r"(?<=[.!?;。！？；])\s+|\n+|(?<=[。！？；])")
_CLAUSE_END = re.compile(r"(?<=[,，;；])\s*")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; tags such as ``incident:p1-network`` stay whole."""
    return _TOKEN.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    parts = (p.strip() for p in _SENTENCE_END.split(text))
    return [p for p in parts if p]


def split_clauses(text: str) -> list[str]:
    parts = (p.strip() for p in _CLAUSE_END.split(text))
    return [p for p in parts if p]


def cosine(a: Sequence[float] | None, b: Sequence[float] | None) -> float:
    if not a or not b:
        return 0.0
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def _normalize_ws(s: str) -> str:
    return " ".join(s.split())


# ---------------------------------------------------------------------------
# deterministic stub
# ---------------------------------------------------------------------------

class StubServices:
    """Hash-trigram embeddings plus extractive summarize/merge."""

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.descriptor = Descriptor(name="stub-trigram", dimension=dimension, version="1")

    @staticmethod
    def trigrams(text: str) -> list[str]:
        s = " " + _normalize_ws(text.lower()) + " "
        return [s[i:i + 3] for i in range(len(s) - 2)]

    def _bucket(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "big") % self.descriptor.dimension

    def embed(self, text: str) -> list[float]:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        vec = [0.0] * self.descriptor.dimension
        for gram in self.trigrams(text):
            vec[self._bucket(gram)] += 1.0
        norm = math.sqrt(sum(v * v for v in vec))
        return [v / norm for v in vec]

    def summarize(self, texts: Sequence[str], focus: str | None, max_tokens: int) -> str:
        if not texts or not any(t.strip() for t in texts):
            raise EmptyInput("nothing to summarize")
        if max_tokens < 1:
            raise EmptyBudget("max_tokens must be >= 1")
        sentences = [s for t in texts for s in split_sentences(t)]
        focus_terms = set(tokenize(focus)) if focus else set()
        scored = [(len(focus_terms & set(tokenize(s))), i) for i, s in enumerate(sentences)]
        if any(score for score, _ in scored):
            order = [i for score, i in sorted(scored, key=lambda p: (-p[0], p[1])) if score > 0]
        else:
            order = list(range(len(sentences)))  # lead sentences

        chosen: list[int] = []
        used = 0
        for i in order:
            n = len(sentences[i].split())
            if used + n <= max_tokens:
                chosen.append(i)
                used += n
        if not chosen:
            # nothing fits whole: truncate the best sentence to the budget
            return " ".join(sentences[order[0]].split()[:max_tokens])
        return " ".join(sentences[i] for i in sorted(chosen))

    def merge_text(self, texts: Sequence[str]) -> str:
        if len(texts) < 2:
            raise TooFew("merge needs at least two texts")
        seen: set[str] = set()
        kept: list[str] = []
        for t in texts:
            for s in split_sentences(t):
                key = _normalize_ws(s)
                if key not in seen:
                    seen.add(key)
                    kept.append(s)
        return "\n".join(kept)


# ---------------------------------------------------------------------------
# remote variant
# ---------------------------------------------------------------------------

class RemoteServices:
    """Client for the JSON-over-HTTP service contract described in the module docstring."""

    def __init__(self, base_url: str, timeout: float = 30.0, descriptor: Descriptor | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        if descriptor is None:
            d = self._call("GET", "/descriptor", None)
            descriptor = Descriptor(name=d["name"], dimension=int(d["dimension"]), version=str(d["version"]))
        self.descriptor = descriptor

    def _call(self, method: str, path: str, body: dict | None) -> dict:
        data = json.dumps(body).encode("utf-8") if body is not None else None
        req = urllib.request.Request(
            self.base_url + path, data=data, method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, json.JSONDecodeError) as exc:
            raise ServiceError(f"{method} {path} failed: {exc}") from exc

    def embed(self, text: str) -> list[float]:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        vec = [float(x) for x in self._call("POST", "/embed", {"text": text})["vector"]]
        if len(vec) != self.descriptor.dimension:
            raise ServiceError(f"expected dimension {self.descriptor.dimension}, got {len(vec)}")
        return vec

    def summarize(self, texts: Sequence[str], focus: str | None, max_tokens: int) -> str:
        if not texts:
            raise EmptyInput("nothing to summarize")
        if max_tokens < 1:
            raise EmptyBudget("max_tokens must be >= 1")
        body = {"texts": list(texts), "focus": focus, "max_tokens": max_tokens}
        return str(self._call("POST", "/summarize", body)["text"])

    def merge_text(self, texts: Sequence[str]) -> str:
        if len(texts) < 2:
            raise TooFew("merge needs at least two texts")
        return str(self._call("POST", "/merge", {"texts": list(texts)})["text"])
