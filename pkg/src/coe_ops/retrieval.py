"""Knowledge-base encoding and exact dot-product retrieval.

KB file layout (all integers little-endian)::

    offset 0   8 bytes   magic b"COEOPSKB"
    offset 8   u32       format version (1)
    offset 12  u64       header length H in bytes
    offset 20  H bytes   UTF-8 JSON header:
                           {"provider_id", "dim", "count", "normalized",
                            "records": [{"id", "text", "task"}, ...]}
    offset 20+H          count * dim float32 values, row-major, one row per record

Vectors are held as float32 in memory as well, so a KB read back from disk
is identical to the one that was written.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset import Dataset, TaskLabel
from .errors import ConfigurationError, IntegrityError, TransportError
from .prompting import question_block

log = logging.getLogger(__name__)

DEFAULT_DIM = 384
DEFAULT_K = 5
KB_MAGIC = b"COEOPSKB"
KB_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> list[Sequence[float]]: ...


class HashEmbeddingProvider:
    """Deterministic mock: each text maps to a seeded pseudo-random unit vector.

    The generator seed is the first 8 bytes (little-endian) of
    ``sha256(f"{seed}:{text}")``; the vector is ``dim`` standard normal draws
    from ``numpy.random.default_rng`` scaled to unit length.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"mock-hash:{seed}:{dim}"

    def vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.vector(t) for t in texts]


_TOKEN = re.compile(r"\w+", re.UNICODE)


class HashingBowProvider:
    """Deterministic mock that keeps lexical overlap: hashed bag of words, L2-normalised.

    Texts sharing vocabulary get high dot products, which makes it usable for
    end-to-end RAG fixtures without a real sentence encoder.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"mock-bow:{seed}:{dim}"

    def vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in _TOKEN.findall(text.casefold()):
            h = hashlib.sha256(f"{self.seed}:{tok}".encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "little") % self.dim
            v[idx] += 1.0 if h[4] & 1 else -1.0
        norm = np.linalg.norm(v)
        if norm == 0:
            v[0] = 1.0
            return v
        return v / norm

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.vector(t) for t in texts]


class RemoteEmbeddingProvider:
    """OpenAI-compatible ``POST {base_url}/embeddings`` client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int = DEFAULT_DIM,
        api_key: str | None = None,
        timeout: float = 60.0,
        client=None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.provider_id = f"remote:{model}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        import httpx

        try:
            resp = self._client.post(f"{self.base_url}/embeddings", json={"model": self.model, "input": list(texts)})
        except httpx.HTTPError as exc:
            raise TransportError(f"embeddings request failed: {exc}") from exc
        if resp.status_code >= 400:
            retryable = resp.status_code == 429 or resp.status_code >= 500
            raise TransportError(f"embeddings endpoint returned {resp.status_code}", retryable=retryable)
        data = resp.json().get("data") or []
        if len(data) != len(texts):
            raise TransportError(f"embeddings endpoint returned {len(data)} vectors for {len(texts)} inputs")
        return [item["embedding"] for item in data]


def _as_vector(values, dim: int, normalize: bool) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != dim:
        raise ConfigurationError(f"embedding has shape {v.shape}, provider declares dim {dim}")
    if not np.all(np.isfinite(v)):
        raise TransportError("embedding contains non-finite values", retryable=False)
    if normalize:
        norm = np.linalg.norm(v)
        if norm > 0:
            v = v / norm
    return v


def encode(text: str, provider: EmbeddingProvider, *, normalize: bool = False) -> np.ndarray:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("cannot encode empty text")
    (values,) = provider.embed([text])
    return _as_vector(values, provider.dim, normalize)


def similarity(q: np.ndarray, c: np.ndarray) -> float:
    """Plain dot product; no normalisation is applied here."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if q.shape != c.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {c.shape}")
    return float(np.dot(q, c))


def softmax(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


@dataclass(frozen=True)
class KBRecord:
    question_id: str
    text: str
    task: TaskLabel


@dataclass
class KnowledgeBase:
    records: list[KBRecord]
    vectors: np.ndarray  # float32, shape (len(records), dim)
    provider_id: str
    dim: int
    normalized: bool = False
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(len(self.records), self.dim)
        ids = [r.question_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise IntegrityError("knowledge base has duplicate question ids")
        if not np.all(np.isfinite(self.vectors)):
            raise IntegrityError("knowledge base contains non-finite vectors")
        self._index = {qid: i for i, qid in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.records == other.records
            and self.provider_id == other.provider_id
            and self.dim == other.dim
            and self.normalized == other.normalized
            and np.array_equal(self.vectors, other.vectors)
        )

    def index_of(self, question_id: str) -> int | None:
        return self._index.get(question_id)

    def save(self, path: str | Path) -> None:
        header = {
            "provider_id": self.provider_id,
            "dim": self.dim,
            "count": len(self.records),
            "normalized": self.normalized,
            "records": [{"id": r.question_id, "text": r.text, "task": r.task.name} for r in self.records],
        }
        blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
        body = self.vectors.astype("<f4", copy=False).tobytes(order="C")
        Path(path).write_bytes(_PREFIX.pack(KB_MAGIC, KB_VERSION, len(blob)) + blob + body)

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        data = Path(path).read_bytes()
        if len(data) < _PREFIX.size:
            raise IntegrityError(f"{path}: truncated knowledge base file")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != KB_MAGIC:
            raise IntegrityError(f"{path}: not a knowledge base file")
        if version != KB_VERSION:
            raise IntegrityError(f"{path}: unsupported knowledge base version {version}")
        start = _PREFIX.size
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        count, dim = header["count"], header["dim"]
        body = data[start + hlen:]
        if len(body) != count * dim * 4:
            raise IntegrityError(f"{path}: vector block has {len(body)} bytes, expected {count * dim * 4}")
        vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
        records = [KBRecord(r["id"], r["text"], TaskLabel(r["task"])) for r in header["records"]]
        return cls(records, vectors, header["provider_id"], dim, bool(header.get("normalized", False)))


@dataclass(frozen=True)
class Hit:
    record: KBRecord
    similarity: float
    probability: float


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[Hit, ...]


def retrieve(
    q: np.ndarray,
    kb: KnowledgeBase,
    k: int = DEFAULT_K,
    *,
    exclude_id: str | None = None,
) -> RetrievalResult:
    """Top-``k`` records by dot product, with softmax weights over the whole KB.

    Ties keep insertion order. ``exclude_id`` drops one record (the query's
    own entry) before scoring.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (kb.dim,):
        raise ValueError(f"dimension mismatch: query {q.shape}, knowledge base dim {kb.dim}")
    candidates = np.arange(len(kb))
    skip = kb.index_of(exclude_id) if exclude_id is not None else None
    if skip is not None:
        candidates = candidates[candidates != skip]
        if candidates.size == 0:
            raise ValueError("knowledge base is empty after excluding the query record")
    scores = kb.vectors[candidates].astype(np.float64) @ q
    probs = softmax(scores)
    # stable sort on -score keeps insertion order for equal scores
    order = np.argsort(-scores, kind="stable")[: min(k, candidates.size)]
    hits = tuple(
        Hit(kb.records[int(candidates[i])], float(scores[i]), float(probs[i])) for i in order
    )
    return RetrievalResult(hits)


def build_kb(
    d: Dataset,
    provider: EmbeddingProvider,
    *,
    split: str | None = "eval",
    normalize: bool = False,
    partial_path: str | Path | None = None,
    batch_size: int = 32,
    parallelism: int = 1,
) -> KnowledgeBase:
    """Embed every question of ``d`` (optionally one split) into a knowledge base.

    With ``partial_path`` each finished batch is appended to a JSONL sidecar;
    a rerun after a provider failure embeds only the missing questions.
    """
    subset = [q for q in d.questions if split is None or q.split == split]
    if not subset:
        raise ValueError(f"no questions in dataset {d.name} for split {split!r}")

    done: dict[str, list[float]] = {}
    partial = Path(partial_path) if partial_path else None
    if partial is not None and partial.exists():
        with partial.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    raise IntegrityError(f"{partial}: corrupt line {lineno}") from None
                if rec.get("provider_id") != provider.provider_id:
                    raise ConfigurationError(
                        f"{partial} was built with {rec.get('provider_id')}, not {provider.provider_id}"
                    )
                done[rec["id"]] = rec["vector"]

    todo = [q for q in subset if q.id not in done]
    batches = [todo[i:i + batch_size] for i in range(0, len(todo), batch_size)]
    if batches:
        log.info("embedding %d questions in %d batches", len(todo), len(batches))

    def run(batch):
        return batch, provider.embed([question_block(q) for q in batch])

    fh = partial.open("a", encoding="utf-8") if partial is not None else None
    try:
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            for batch, vectors in pool.map(run, batches):
                for q, v in zip(batch, vectors):
                    vec = _as_vector(v, provider.dim, False)
                    done[q.id] = [float(x) for x in vec]
                    if fh is not None:
                        fh.write(json.dumps({"provider_id": provider.provider_id, "id": q.id, "vector": done[q.id]}) + "\n")
                if fh is not None:
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()

    records = [KBRecord(q.id, question_block(q), q.gold_task) for q in subset]
    vectors = np.array([_as_vector(done[q.id], provider.dim, normalize) for q in subset], dtype=np.float64)
    return KnowledgeBase(records, vectors.astype(np.float32), provider.provider_id, provider.dim, normalize)


def make_embedding_provider(spec: dict | None) -> EmbeddingProvider:
    """Build a provider from a config mapping such as ``{"kind": "hash", "dim": 384}``."""
    import os

    spec = dict(spec or {"kind": "hash"})
    kind = spec.pop("kind", "hash")
    dim = int(spec.get("dim", DEFAULT_DIM))
    if kind == "hash":
        return HashEmbeddingProvider(dim=dim, seed=int(spec.get("seed", 0)))
    if kind == "bow":
        return HashingBowProvider(dim=dim, seed=int(spec.get("seed", 0)))
    if kind == "remote":
        if "api_key" in spec:
            raise ConfigurationError("API keys must be supplied through api_key_env, not inline")
        key_env = spec.get("api_key_env")
        key = os.environ.get(key_env) if key_env else None
        if key_env and key is None:
            raise ConfigurationError(f"environment variable {key_env} is not set")
        try:
            return RemoteEmbeddingProvider(spec["base_url"], spec["model"], dim, key, float(spec.get("timeout", 60)))
        except KeyError as exc:
            raise ConfigurationError(f"remote embedding config missing {exc.args[0]!r}") from None
    raise ConfigurationError(f"unknown embedding provider kind {kind!r}")
