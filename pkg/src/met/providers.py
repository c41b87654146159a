"""Model and tool backends.

Every external dependency (text generation, embeddings, web search, image
retrieval, teacher labeling, alignment judging) hides behind a small
interface with two implementations: a deterministic offline one for tests
and desk-scale runs, and an HTTP one configured through environment
variables for real deployments.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .errors import (
    ClientFailure,
    JudgeFailure,
    ProviderFailure,
    TeacherFailure,
    ToolFailure,
)

ENV_LLM_ENDPOINT = "MET_LLM_ENDPOINT"
ENV_LLM_TIMEOUT_MS = "MET_LLM_TIMEOUT_MS"
ENV_EMBED_ENDPOINT = "MET_EMBED_ENDPOINT"
ENV_EMBED_DIM = "MET_EMBED_DIM"
DEFAULT_TIMEOUT_MS = 30000
DEFAULT_EMBED_DIM = 64


def prompt_digest(prompt: str) -> str:
    """Stable short digest used to key canned responses on disk."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class TextProvider(Protocol):
    def generate(self, prompt: str) -> str: ...


class EmbeddingProvider(Protocol):
    def embed(self, texts: list[str]) -> list[list[float]]: ...


class MockTextProvider:
    """Replays canned responses from `<fixture_dir>/<digest>.txt`.

    A missing fixture is a hard failure: silent fallbacks would let a test
    pass against a prompt nobody reviewed.
    """

    def __init__(self, fixture_dir: str | Path) -> None:
        self.fixture_dir = Path(fixture_dir)
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        path = self.fixture_dir / f"{prompt_digest(prompt)}.txt"
        if not path.is_file():
            raise ProviderFailure(f"no canned response for digest {path.stem}")
        return path.read_text(encoding="utf-8")

    def record(self, prompt: str, response: str) -> Path:
        """Helper for building fixture directories from known prompts."""
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        path = self.fixture_dir / f"{prompt_digest(prompt)}.txt"
        path.write_text(response, encoding="utf-8")
        return path


class CallableTextProvider:
    """Adapts a plain function to the provider interface; used heavily in
    tests where the response depends on the prompt content."""

    def __init__(self, fn) -> None:
        self.fn = fn
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        return self.fn(prompt)


class HttpTextProvider:
    def __init__(self, endpoint: Optional[str] = None, timeout_ms: Optional[int] = None) -> None:
        self.endpoint = endpoint or os.environ.get(ENV_LLM_ENDPOINT, "")
        if not self.endpoint:
            raise ProviderFailure(f"{ENV_LLM_ENDPOINT} is not set")
        if timeout_ms is None:
            timeout_ms = int(os.environ.get(ENV_LLM_TIMEOUT_MS, DEFAULT_TIMEOUT_MS))
        self.timeout = timeout_ms / 1000.0
        self.calls = 0

    def generate(self, prompt: str) -> str:
        import httpx

        self.calls += 1
        try:
            resp = httpx.post(self.endpoint, json={"prompt": prompt}, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise ProviderFailure(f"text endpoint failed: {exc}") from exc
        if not isinstance(body, dict) or "text" not in body:
            raise ProviderFailure("text endpoint returned no 'text' field")
        return str(body["text"])


class MockEmbeddingProvider:
    """Deterministic unit vectors derived from a seeded digest of the text.

    Distinct texts land far apart with overwhelming probability, equal texts
    always coincide, which is all the offline pipeline needs.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, seed: int = 0) -> None:
        if dim < 2:
            raise ValueError("embedding dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self.calls = 0

    def embed(self, texts: list[str]) -> list[list[float]]:
        self.calls += 1
        out = []
        for text in texts:
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            vec = rng.standard_normal(self.dim)
            norm = float(np.linalg.norm(vec))
            out.append((vec / norm).tolist())
        return out


class HttpEmbeddingProvider:
    def __init__(self, endpoint: Optional[str] = None, dim: Optional[int] = None,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS) -> None:
        self.endpoint = endpoint or os.environ.get(ENV_EMBED_ENDPOINT, "")
        if not self.endpoint:
            raise ProviderFailure(f"{ENV_EMBED_ENDPOINT} is not set")
        if dim is None:
            raw = os.environ.get(ENV_EMBED_DIM)
            dim = int(raw) if raw else None
        self.dim = dim
        self.timeout = timeout_ms / 1000.0
        self.calls = 0

    def embed(self, texts: list[str]) -> list[list[float]]:
        import httpx

        self.calls += 1
        try:
            resp = httpx.post(self.endpoint, json={"texts": texts}, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise ProviderFailure(f"embedding endpoint failed: {exc}") from exc
        vectors = body.get("vectors") if isinstance(body, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ProviderFailure("embedding endpoint returned malformed 'vectors'")
        if self.dim is not None:
            for vec in vectors:
                if len(vec) != self.dim:
                    raise ProviderFailure(
                        f"expected dim {self.dim}, endpoint returned {len(vec)}"
                    )
        return [[float(x) for x in vec] for vec in vectors]


# ----------------------------------------------------------------- search


@dataclass
class SearchResult:
    snippet: str
    source: str


class SearchTool(Protocol):
    def search(self, query: str) -> list[SearchResult]: ...


class FixtureSearchTool:
    """Keyword-triggered canned search results.

    Entries are {"match", "snippet", "source"}; an entry fires when its
    match string occurs in the query (case-insensitive substring).
    """

    def __init__(self, entries: list[dict]) -> None:
        self.entries = entries
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureSearchTool":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = data["entries"] if isinstance(data, dict) else data
        return cls(entries)

    def search(self, query: str) -> list[SearchResult]:
        self.calls += 1
        q = query.casefold()
        hits = []
        for entry in self.entries:
            if entry.get("match", "").casefold() in q:
                hits.append(SearchResult(entry.get("snippet", ""), entry.get("source", "")))
        return hits


class FailingSearchTool:
    def search(self, query: str) -> list[SearchResult]:
        raise ToolFailure("search backend unavailable")


class HttpSearchTool:
    def __init__(self, endpoint: str, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> None:
        self.endpoint = endpoint
        self.timeout = timeout_ms / 1000.0

    def search(self, query: str) -> list[SearchResult]:
        import httpx

        try:
            resp = httpx.post(self.endpoint, json={"query": query}, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise ToolFailure(f"search endpoint failed: {exc}") from exc
        results = body.get("results", []) if isinstance(body, dict) else []
        return [SearchResult(r.get("snippet", ""), r.get("source", "")) for r in results]


# ----------------------------------------------------------------- retrieval


class RetrievalClient(Protocol):
    def query(self, text: str, limit: int) -> list[dict]: ...


class FixtureRetrievalClient:
    """Returns canned image records for queries.

    The fixture maps trigger strings to record lists; a trigger fires when
    it occurs in the query (case-insensitive). Records are dicts with at
    least {"id", "image_path", "alt_text", "url"} and may carry
    pre-extracted "dhash" / "embedding" fields for image-free test runs.
    """

    def __init__(self, mapping: dict[str, list[dict]]) -> None:
        self.mapping = mapping
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureRetrievalClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def query(self, text: str, limit: int) -> list[dict]:
        self.calls += 1
        q = text.casefold()
        hits: list[dict] = []
        for trigger, records in self.mapping.items():
            if trigger.casefold() in q:
                hits.extend(records)
        return hits[:limit]


class FailingRetrievalClient:
    def query(self, text: str, limit: int) -> list[dict]:
        raise ClientFailure("retrieval backend unavailable")


# ----------------------------------------------------------- teacher / judge


@dataclass
class TeacherLabel:
    is_medical: bool
    quality: float
    modality: str


class FixtureTeacher:
    """Labels records from a truth table keyed by record id; ids listed in
    `failing` raise TeacherFailure to exercise partial-failure handling."""

    def __init__(self, labels: dict[str, dict], failing: Optional[set[str]] = None) -> None:
        self.labels = labels
        self.failing = failing or set()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureTeacher":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(obj.get("labels", {}), set(obj.get("failing", [])))

    def label(self, record) -> TeacherLabel:
        self.calls += 1
        rid = getattr(record, "id", record)
        if rid in self.failing:
            raise TeacherFailure(f"teacher failed on {rid}")
        if rid not in self.labels:
            raise TeacherFailure(f"teacher has no label for {rid}")
        raw = self.labels[rid]
        return TeacherLabel(
            bool(raw.get("is_medical", False)),
            float(raw.get("quality", 0.0)),
            str(raw.get("modality", "unknown")),
        )


class FixtureJudge:
    """Pass/fail verdicts keyed by record id, with designated failures."""

    def __init__(self, verdicts: dict[str, dict], failing: Optional[set[str]] = None) -> None:
        self.verdicts = verdicts
        self.failing = failing or set()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureJudge":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(obj.get("verdicts", {}), set(obj.get("failing", [])))

    def judge(self, record) -> tuple[bool, str]:
        self.calls += 1
        rid = getattr(record, "id", record)
        if rid in self.failing:
            raise JudgeFailure(f"judge timed out on {rid}")
        raw = self.verdicts.get(rid)
        if raw is None:
            raise JudgeFailure(f"judge has no verdict for {rid}")
        return bool(raw.get("pass", False)), str(raw.get("rationale", ""))


# ----------------------------------------------------------------- factories


def make_text_provider(config: dict) -> TextProvider:
    mode = config.get("mode", "mock")
    if mode == "mock":
        fixture_dir = config.get("fixture_dir")
        if not fixture_dir:
            raise ProviderFailure("mock text provider needs 'fixture_dir'")
        return MockTextProvider(fixture_dir)
    if mode == "http":
        return HttpTextProvider(config.get("endpoint"), config.get("timeout_ms"))
    raise ProviderFailure(f"unknown text provider mode {mode!r}")


def make_embedding_provider(config: dict) -> EmbeddingProvider:
    mode = config.get("mode", "mock")
    if mode == "mock":
        return MockEmbeddingProvider(
            dim=int(config.get("dim", DEFAULT_EMBED_DIM)),
            seed=int(config.get("seed", 0)),
        )
    if mode == "http":
        return HttpEmbeddingProvider(config.get("endpoint"), config.get("dim"))
    raise ProviderFailure(f"unknown embedding provider mode {mode!r}")
