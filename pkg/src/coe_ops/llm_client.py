"""Chat-completion access to classifier and expert models.

Two families of provider share one interface: :class:`HttpChatProvider` for
OpenAI-compatible endpoints and a handful of deterministic mocks used by
tests and dry runs. :func:`complete` wraps either with retries, and
:class:`RunCheckpoint` makes long evaluation runs resumable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .dataset import OPTION_LETTERS, Dataset
from .errors import CheckpointError, ConfigurationError, ContentFilterError, TransportError
from .prompting import RenderedPrompt, parse_context

log = logging.getLogger(__name__)

STAGES = ("classify", "answer")


@dataclass(frozen=True)
class EndpointConfig:
    name: str
    model: str = ""
    base_url: str = ""
    api_key_env: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    mock: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigurationError(f"endpoint {self.name}: temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigurationError(f"endpoint {self.name}: max_retries must be >= 0")
        if self.max_tokens <= 0:
            raise ConfigurationError(f"endpoint {self.name}: max_tokens must be positive")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        if "api_key" in data:
            raise ConfigurationError(
                f"endpoint {data.get('name')}: put the key in an environment variable and name it in api_key_env"
            )
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"endpoint {data.get('name')}: unknown fields {sorted(unknown)}")
        if "name" not in data:
            raise ConfigurationError("endpoint config needs a name")
        return cls(**data)

    def api_key(self) -> str | None:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env)
        if key is None:
            raise ConfigurationError(f"endpoint {self.name}: environment variable {self.api_key_env} is not set")
        return key


class ChatProvider(Protocol):
    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str: ...


class HttpChatProvider:
    """POSTs ``{model, messages, temperature, max_tokens}`` to ``{base_url}/chat/completions``."""

    def __init__(self, client=None):
        self._client = client
        self._lock = threading.Lock()

    def _http(self, cfg: EndpointConfig):
        import httpx

        with self._lock:
            if self._client is None:
                self._client = httpx.Client(timeout=cfg.timeout)
            return self._client

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        import httpx

        if not cfg.base_url or not cfg.model:
            raise ConfigurationError(f"endpoint {cfg.name}: base_url and model are required for live calls")
        headers = {}
        key = cfg.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._http(cfg).post(url, json=body, headers=headers, timeout=cfg.timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"{cfg.name}: {type(exc).__name__}: {exc}") from exc

        if resp.status_code >= 400:
            text = resp.text[:500]
            if "content_filter" in text or "content filter" in text.lower():
                raise ContentFilterError(f"{cfg.name}: prompt rejected by content filter ({resp.status_code})")
            retryable = resp.status_code == 429 or resp.status_code >= 500
            raise TransportError(f"{cfg.name}: HTTP {resp.status_code}: {text}", retryable=retryable)
        try:
            choice = resp.json()["choices"][0]
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"{cfg.name}: malformed response body") from exc
        if choice.get("finish_reason") == "content_filter":
            raise ContentFilterError(f"{cfg.name}: completion blocked by content filter")
        content = (choice.get("message") or {}).get("content")
        return content if isinstance(content, str) else ""


# --- deterministic mocks -------------------------------------------------


class StaticProvider:
    """Always returns the same text."""

    def __init__(self, response: str):
        self.response = response

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        return self.response


class ScriptedProvider:
    """Looks the response up by question id; falls back to ``default``."""

    def __init__(self, table: Mapping[str, str], default: str | None = None):
        self.table = dict(table)
        self.default = default

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        if prompt.question_id in self.table:
            return self.table[prompt.question_id]
        if self.default is None:
            raise ConfigurationError(f"{cfg.name}: no scripted response for question {prompt.question_id!r}")
        return self.default


def _unit_hash(*parts: object) -> float:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _wrong_letter(gold: str, *parts: object) -> str:
    others = [x for x in OPTION_LETTERS if x != gold]
    return others[int(_unit_hash("wrong", *parts) * len(others))]


def quota_answer_table(
    d: Dataset,
    accuracy: float | Mapping[str, float],
    *,
    name: str,
    seed: int = 0,
) -> dict[str, str]:
    """Per-question letters for a mock expert with an exact per-task hit count.

    For each task, ``round(acc * N_i)`` questions (chosen by a seeded hash
    ranking) get the gold letter; the rest get a deterministic wrong letter.
    """
    table = {}
    for t in d.tasks:
        acc = accuracy if isinstance(accuracy, (int, float)) else _task_lookup(accuracy, t.name)
        if not 0 <= acc <= 1:
            raise ConfigurationError(f"mock expert {name}: accuracy {acc} outside [0, 1]")
        qs = sorted(d.questions_for(t), key=lambda q: (_unit_hash(seed, name, q.id), q.id))
        k = round(acc * len(qs))
        for i, q in enumerate(qs):
            table[q.id] = q.gold_answer if i < k else _wrong_letter(q.gold_answer, seed, name, q.id)
    return table


def _task_lookup(mapping: Mapping[str, float], task: str) -> float:
    for key, v in mapping.items():
        if key.strip().casefold() == task.casefold():
            return float(v)
    raise ConfigurationError(f"no mock accuracy configured for task {task}")


class LetterTableProvider:
    """Mock expert answering from a question-id → letter table in the expert prompt's answer format."""

    def __init__(self, letters: Mapping[str, str], template: str = "Let me think step by step. So the answer is ({})."):
        self.letters = dict(letters)
        self.template = template

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        letter = self.letters.get(prompt.question_id)
        if letter is None:
            return "I am not sure."
        return self.template.format(letter)


class ContextMajorityProvider:
    """Mock classifier that copies the majority task of the retrieval context.

    Without a context block it defers to ``fallback`` (or declines to answer).
    Ties go to the task of the highest-ranked hit among the tied ones.
    """

    def __init__(self, fallback: ChatProvider | None = None):
        self.fallback = fallback

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        pairs = parse_context(prompt.text)
        if not pairs:
            if self.fallback is None:
                return "I cannot determine the task."
            return self.fallback.send(prompt, cfg)
        votes = Counter(task for _, task in pairs)
        top = max(votes.values())
        winner = next(task for _, task in pairs if votes[task] == top)
        return f"Based on the examples, **Task: [{winner}] **"


class FailingProvider:
    """Raises a transport error on every call (endpoint down)."""

    def __init__(self, retryable: bool = True):
        self.retryable = retryable
        self.calls = 0

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        self.calls += 1
        raise TransportError(f"{cfg.name}: connection refused", retryable=self.retryable)


def make_mock_provider(spec: Mapping[str, Any], dataset: Dataset | None = None, *, name: str = "") -> ChatProvider:
    """Build a mock from a config mapping.

    Kinds: ``static`` (response), ``script`` (responses or path, default),
    ``quota`` (accuracy, seed; needs the dataset), ``context-majority``
    (optional fallback spec), ``fail``.
    """
    kind = spec.get("kind")
    if kind == "static":
        return StaticProvider(str(spec.get("response", "")))
    if kind == "script":
        table = dict(spec.get("responses") or {})
        if "path" in spec:
            with open(spec["path"], encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        table[str(rec["id"])] = rec["response"]
        return ScriptedProvider(table, spec.get("default"))
    if kind == "quota":
        if dataset is None:
            raise ConfigurationError(f"mock {name}: quota experts need the dataset")
        letters = quota_answer_table(dataset, spec["accuracy"], name=spec.get("name", name), seed=int(spec.get("seed", 0)))
        return LetterTableProvider(letters)
    if kind == "context-majority":
        fb = spec.get("fallback")
        return ContextMajorityProvider(make_mock_provider(fb, dataset, name=name) if fb else None)
    if kind == "fail":
        return FailingProvider(bool(spec.get("retryable", True)))
    raise ConfigurationError(f"mock {name}: unknown kind {kind!r}")


def complete(
    prompt: RenderedPrompt,
    cfg: EndpointConfig,
    provider: ChatProvider,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send one prompt, retrying transient failures with exponential backoff.

    Makes at most ``cfg.max_retries + 1`` attempts. Content-filter rejections
    and other non-retryable errors are raised immediately.
    """
    attempts = 0
    while True:
        attempts += 1
        try:
            return provider.send(prompt, cfg)
        except TransportError as exc:
            exc.attempts = attempts
            if not exc.retryable:
                raise
            if attempts > cfg.max_retries:
                raise TransportError(
                    f"{cfg.name}: giving up after {attempts} attempts: {exc}", retryable=False, attempts=attempts
                ) from exc
            delay = min(cfg.backoff * 2 ** (attempts - 1), 30.0)
            log.warning("%s: attempt %d failed (%s), retrying in %.1fs", cfg.name, attempts, exc, delay)
            sleep(delay)


# --- checkpointing -------------------------------------------------------


@dataclass(frozen=True)
class CheckpointRecord:
    run_id: str
    question_id: str
    stage: str
    raw: str
    parsed: Any
    timestamp: str = ""

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "question_id": self.question_id,
            "stage": self.stage,
            "raw": self.raw,
            "parsed": self.parsed,
            "timestamp": self.timestamp,
        }


class RunCheckpoint:
    """Append-only JSONL log of finished (question, stage) completions.

    One file may hold several runs; only records whose ``run_id`` matches
    are visible through this object. Every append is flushed and fsync'd.
    """

    def __init__(self, path: str | Path | None, run_id: str):
        self.path = Path(path) if path is not None else None
        self.run_id = run_id
        self._records: dict[tuple[str, str], CheckpointRecord] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    record = CheckpointRecord(
                        rec["run_id"], rec["question_id"], rec["stage"], rec["raw"], rec["parsed"], rec.get("timestamp", "")
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CheckpointError(f"unreadable record ({exc})", lineno) from None
                if record.stage not in STAGES:
                    raise CheckpointError(f"unknown stage {record.stage!r}", lineno)
                if record.run_id != self.run_id:
                    continue
                key = (record.question_id, record.stage)
                if key in self._records:
                    raise CheckpointError(f"duplicate entry for {key}", lineno)
                self._records[key] = record

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._records

    def get(self, question_id: str, stage: str) -> CheckpointRecord | None:
        return self._records.get((question_id, stage))

    def records(self) -> list[CheckpointRecord]:
        return list(self._records.values())

    def append(self, question_id: str, stage: str, raw: str, parsed: Any) -> CheckpointRecord:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        ts = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
        record = CheckpointRecord(self.run_id, question_id, stage, raw, parsed, ts)
        with self._lock:
            key = (question_id, stage)
            if key in self._records:
                raise ValueError(f"{key} already checkpointed for run {self.run_id}")
            if self.path is not None:
                line = json.dumps(record.to_json(), ensure_ascii=False) + "\n"
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
            self._records[key] = record
        return record


@dataclass(frozen=True)
class WorkItem:
    question_id: str
    stage: str
    prompt: RenderedPrompt


@dataclass
class CallCounter:
    """Wraps a provider and counts calls; handy for resume bookkeeping."""

    inner: ChatProvider
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def send(self, prompt: RenderedPrompt, cfg: EndpointConfig) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.send(prompt, cfg)


def run_with_checkpoint(
    items: Sequence[WorkItem],
    cfg: EndpointConfig,
    provider: ChatProvider,
    checkpoint: RunCheckpoint,
    *,
    parse: Callable[[str], Any] | None = None,
    parallelism: int = 1,
    sleep: Callable[[float], None] = time.sleep,
) -> list[CheckpointRecord]:
    """Complete every item not already in ``checkpoint``, appending as results arrive.

    Returns one record per item, in input order. A provider failure stops the
    run after in-flight items finish; everything completed so far is kept.
    """
    keys = [(it.question_id, it.stage) for it in items]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (question_id, stage) work items")

    def work(item: WorkItem) -> CheckpointRecord:
        done = checkpoint.get(item.question_id, item.stage)
        if done is not None:
            return done
        raw = complete(item.prompt, cfg, provider, sleep=sleep)
        return checkpoint.append(item.question_id, item.stage, raw, parse(raw) if parse else None)

    if parallelism <= 1:
        return [work(it) for it in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(work, items))


def iter_answer_log(records: Iterable[CheckpointRecord]) -> list[tuple[str, str | None]]:
    return [(r.question_id, r.parsed) for r in records if r.stage == "answer"]
