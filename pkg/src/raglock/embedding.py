"""L2-normalized transcript embeddings: truncation, pluggable backends, case base.

Tokenization is a lowercase whitespace split and sentence boundaries are
``[.?!]`` followed by whitespace or end of text; any subword tokenizer a real
embedding model uses lives behind its backend.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .corpus import Corpus, Split
from .errors import BackendError, TransportError, ValidationError

DEFAULT_PSEUDO_DIM = 64
NORM_TOL = 1e-6


class TruncationMode(str, Enum):
    TOKEN_BUDGET = "TOKEN_BUDGET"
    SENTENCE_WISE = "SENTENCE_WISE"


@dataclass(frozen=True)
class TruncationSpec:
    mode: TruncationMode = TruncationMode.TOKEN_BUDGET
    budget: int = 256

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValidationError("truncation budget must be >= 1")

    def key(self) -> str:
        return f"{self.mode.value.lower()}-{self.budget}"

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "budget": self.budget}

    @classmethod
    def from_dict(cls, data: dict) -> "TruncationSpec":
        unknown = set(data) - {"mode", "budget"}
        if unknown:
            raise ValidationError(f"unknown truncation keys: {sorted(unknown)}")
        return cls(mode=TruncationMode(data.get("mode", "TOKEN_BUDGET")),
                   budget=int(data.get("budget", 256)))


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens; the deterministic unit for budgets and proxies."""
    return text.lower().split()


_SENT_END = re.compile(r"[.?!]+(?=\s|$)")


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """(start, stop) spans of whole sentences; trailing unterminated text is one span."""
    spans: list[tuple[int, int]] = []
    start = 0
    for match in _SENT_END.finditer(text):
        spans.append((start, match.end()))
        start = match.end()
    if text[start:].strip():
        spans.append((start, len(text)))
    return spans


def truncate(text: str, spec: TruncationSpec) -> str:
    """Cut a text to the token budget; SENTENCE_WISE keeps whole sentences.

    TOKEN_BUDGET keeps the first `budget` whitespace tokens. SENTENCE_WISE
    keeps the longest prefix of whole sentences whose token total fits the
    budget, always keeping at least the first sentence. Texts already within
    budget are returned unchanged.
    """
    if not text:
        return ""
    if spec.mode is TruncationMode.TOKEN_BUDGET:
        tokens = text.split()
        if len(tokens) <= spec.budget:
            return text
        return " ".join(tokens[: spec.budget])
    total = 0
    end: int | None = None
    for start, stop in sentence_spans(text):
        count = len(text[start:stop].split())
        if end is not None and total + count > spec.budget:
            break
        total += count
        end = stop
    return text[:end].rstrip() if end is not None else ""


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    vec = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return vec / norm


@runtime_checkable
class EmbedderBackend(Protocol):
    embedder_id: str

    def raw_vector(self, text: str, item_id: str | None = None) -> np.ndarray: ...


class PseudoEmbedder:
    """Seeded feature hash of the token multiset, projected to a fixed dimension.

    Deterministic, self-contained stand-in for a sentence embedder: texts
    sharing vocabulary land near each other, disjoint vocabularies do not.
    """

    def __init__(self, dim: int = DEFAULT_PSEUDO_DIM, seed: int = 0):
        if dim < 2:
            raise ValidationError("pseudo embedder dimension must be >= 2")
        self.dim = dim
        self.seed = seed
        self.embedder_id = f"pseudo-d{dim}-s{seed}"
        self._salt = str(seed).encode("utf-8")[:16]

    def raw_vector(self, text: str, item_id: str | None = None) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            digest = hashlib.blake2b(
                token.encode("utf-8"), digest_size=8, salt=self._salt
            ).digest()
            idx = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 else -1.0
            vec[idx] += sign
        return vec


class PrecomputedEmbedder:
    """Vectors read from a sidecar JSONL produced by an external model.

    File format: a header line {"embedder_id", "dim", "truncation"} followed
    by {"id", "vector"} rows. Lookup is by transcript id only.
    """

    def __init__(self, path: str | Path):
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"precomputed embedding file not found: {p}")
        self._vectors: dict[str, np.ndarray] = {}
        with p.open(encoding="utf-8") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line)
                self.embedder_id = str(header["embedder_id"])
                self.dim = int(header["dim"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"bad embedding file header in {p}: {exc}") from exc
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                vec = np.asarray(row["vector"], dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise ValidationError(
                        f"vector for {row.get('id')!r} has dim {vec.shape}, expected {self.dim}"
                    )
                self._vectors[str(row["id"])] = vec

    def raw_vector(self, text: str, item_id: str | None = None) -> np.ndarray:
        if item_id is None or item_id not in self._vectors:
            raise BackendError(f"precomputed embedder has no vector for id {item_id!r}")
        return self._vectors[item_id]


class HttpEmbedder:
    """POSTs {model, input} to an embeddings endpoint; expects {data: [{embedding}]}."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = "RAGLOCK_EMBED_API_KEY",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.25,
        trace=None,
        sleep=time.sleep,
    ):
        self.url = url
        self.model = model
        self.api_key = os.environ.get(api_key_env)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.trace = trace
        self.sleep = sleep
        self.embedder_id = f"http-{model}"
        self.calls = 0
        self.dim: int | None = None

    def raw_vector(self, text: str, item_id: str | None = None) -> np.ndarray:
        import requests

        payload = {"model": self.model, "input": text}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            self.calls += 1
            try:
                response = requests.post(
                    self.url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                if attempt < self.max_retries:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if self.trace is not None:
                self.trace({
                    "kind": "embed",
                    "url": self.url,
                    "status": response.status_code,
                    "request": {"model": self.model, "input": text[:200]},
                })
            if response.status_code >= 500:
                last_error = TransportError(
                    f"embedding endpoint returned {response.status_code}", attempts=attempt
                )
                if attempt < self.max_retries:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if response.status_code != 200:
                raise TransportError(
                    f"embedding endpoint returned {response.status_code}: "
                    f"{response.text[:200]}",
                    attempts=attempt,
                )
            try:
                body = response.json()
                vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed embedding response: {exc}") from exc
            if self.dim is None:
                self.dim = int(vec.shape[0])
            return vec
        raise TransportError(
            f"embedding endpoint unreachable after {self.max_retries} attempts: {last_error}",
            attempts=self.max_retries,
        )


def embed(
    text: str,
    spec: TruncationSpec,
    backend: EmbedderBackend,
    item_id: str | None = None,
) -> np.ndarray:
    """Truncate, embed, and L2-normalize one text.

    A zero vector from the backend is rejected rather than normalized.
    """
    truncated = truncate(text, spec)
    raw = np.asarray(backend.raw_vector(truncated, item_id=item_id), dtype=np.float64)
    if raw.ndim != 1:
        raise BackendError(f"backend returned a vector of rank {raw.ndim}, expected 1")
    if not np.all(np.isfinite(raw)):
        raise BackendError("backend returned non-finite values")
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise ValidationError("backend returned a zero vector; cannot normalize")
    return raw / norm


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    norm: float

    @classmethod
    def of(cls, item_id: str, vector: np.ndarray) -> "EmbeddingRecord":
        vec = np.asarray(vector, dtype=np.float64)
        return cls(id=item_id, vector=vec, norm=float(np.linalg.norm(vec)))


class CaseBase:
    """Offline pool of labeled, unit-norm transcript embeddings.

    Records are kept sorted by id, so construction is order-independent.
    ``texts`` maps record ids to the truncated text used for prompt examples.
    """

    def __init__(
        self,
        records: Iterable[EmbeddingRecord],
        labels: dict[str, int],
        truncation: TruncationSpec,
        embedder_id: str,
        texts: dict[str, str] | None = None,
    ):
        ordered = sorted(records, key=lambda r: r.id)
        if not ordered:
            raise ValidationError("case base must contain at least one record")
        seen: set[str] = set()
        dims = {rec.vector.shape for rec in ordered}
        if len(dims) != 1:
            raise ValidationError(f"records carry mixed dimensions: {sorted(dims)}")
        for rec in ordered:
            if rec.id in seen:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.id not in labels or labels[rec.id] not in (0, 1):
                raise ValidationError(f"record {rec.id!r} has no binary label")
            if abs(rec.norm - 1.0) > NORM_TOL:
                raise ValidationError(
                    f"record {rec.id!r} is not unit norm (norm={rec.norm:.8f})"
                )
        self.records: tuple[EmbeddingRecord, ...] = tuple(ordered)
        self.labels: dict[str, int] = {rec.id: labels[rec.id] for rec in ordered}
        self.dim: int = int(ordered[0].vector.shape[0])
        self.truncation = truncation
        self.embedder_id = embedder_id
        self.texts: dict[str, str] = dict(texts or {})
        self.ids: tuple[str, ...] = tuple(rec.id for rec in ordered)
        self.matrix: np.ndarray = np.stack([rec.vector for rec in ordered])
        self.row_norms: np.ndarray = np.linalg.norm(self.matrix, axis=1)
        self._index = {rec.id: i for i, rec in enumerate(ordered)}

    def __len__(self) -> int:
        return len(self.records)

    def label_of(self, item_id: str) -> int:
        return self.labels[item_id]

    def vector_of(self, item_id: str) -> np.ndarray:
        return self.records[self._index[item_id]].vector

    def same_content(self, other: "CaseBase") -> bool:
        return (
            self.ids == other.ids
            and self.labels == other.labels
            and self.embedder_id == other.embedder_id
            and self.truncation == other.truncation
            and np.allclose(self.matrix, other.matrix)
        )


def _cache_key(embedder_id: str, spec: TruncationSpec, corpus_hash: str,
               splits: frozenset[Split]) -> str:
    pool = "+".join(sorted(s.value for s in splits))
    raw = f"{embedder_id}|{spec.key()}|{corpus_hash}|{pool}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]


def _read_cache(path: Path, embedder_id: str, spec: TruncationSpec,
                expected_ids: Sequence[str]) -> list[EmbeddingRecord] | None:
    if not path.exists():
        return None
    try:
        with path.open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("embedder_id") != embedder_id:
                return None
            if header.get("truncation") != spec.to_dict():
                return None
            dim = int(header["dim"])
            records = []
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                vec = np.asarray(row["vector"], dtype=np.float64)
                if vec.shape != (dim,):
                    return None
                records.append(EmbeddingRecord.of(str(row["id"]), vec))
    except (json.JSONDecodeError, KeyError, ValueError, TypeError):
        return None
    if sorted(r.id for r in records) != sorted(expected_ids):
        return None
    return records


def _write_cache(path: Path, records: Sequence[EmbeddingRecord], embedder_id: str,
                 spec: TruncationSpec) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "embedder_id": embedder_id,
            "dim": int(records[0].vector.shape[0]),
            "truncation": spec.to_dict(),
        }) + "\n")
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "vector": rec.vector.tolist()}) + "\n")
    os.replace(tmp, path)


def build_case_base(
    corpus: Corpus,
    pool: Split | Iterable[Split],
    spec: TruncationSpec,
    backend: EmbedderBackend,
    cache_dir: str | Path | None = None,
) -> CaseBase:
    """Embed every pool item into a CaseBase; all pool items must be labeled.

    When ``cache_dir`` is set, vectors are cached keyed by
    (embedder_id, truncation, corpus hash, pool) and written atomically.
    """
    splits = frozenset([pool]) if isinstance(pool, Split) else frozenset(pool)
    items = sorted(
        (item for item in corpus.items if item.split in splits), key=lambda t: t.id
    )
    if not items:
        raise ValidationError(f"case-base pool is empty for splits {sorted(s.value for s in splits)}")
    unlabeled = [item.id for item in items if item.label is None]
    if unlabeled:
        raise ValidationError(
            f"case-base pool items must be labeled; missing labels for {unlabeled[:5]}"
        )
    labels = {item.id: int(item.label) for item in items}  # type: ignore[arg-type]
    texts = {item.id: truncate(item.text, spec) for item in items}

    cache_path: Path | None = None
    if cache_dir is not None:
        key = _cache_key(backend.embedder_id, spec, corpus.content_hash(), splits)
        cache_path = Path(cache_dir) / f"emb-{key}.jsonl"
        cached = _read_cache(cache_path, backend.embedder_id, spec, list(labels))
        if cached is not None:
            return CaseBase(cached, labels, spec, backend.embedder_id, texts)

    records = [
        EmbeddingRecord.of(item.id, embed(item.text, spec, backend, item_id=item.id))
        for item in items
    ]
    if cache_path is not None:
        _write_cache(cache_path, records, backend.embedder_id, spec)
    return CaseBase(records, labels, spec, backend.embedder_id, texts)
