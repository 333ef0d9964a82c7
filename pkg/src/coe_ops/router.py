"""Two-stage routing: classify the question's task, then ask that task's expert."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .dataset import Question, TaskLabel
from .errors import ConfigurationError, IntegrityError, TransportError
from .leaderboard import ExpertRef, TaskExpertMap
from .llm_client import ChatProvider, EndpointConfig, RunCheckpoint, complete
from .prompting import (
    ClassifierOutput,
    ExpertAnswer,
    parse_classifier,
    parse_expert,
    question_block,
    render_classifier_prompt,
    render_expert_prompt,
)
from .retrieval import DEFAULT_K, EmbeddingProvider, KnowledgeBase, RetrievalResult, encode, retrieve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingDecision:
    question_id: str
    predicted_task: TaskLabel | None
    chosen_expert: ExpertRef
    classifier_raw: str
    expert_answer: ExpertAnswer | None
    retrieval_hits: tuple[tuple[str, float], ...] | None = None
    errors: tuple[str, ...] = ()
    oracle: bool = False

    @property
    def failed(self) -> bool:
        return self.expert_answer is None

    @property
    def choice(self) -> str | None:
        return self.expert_answer.choice if self.expert_answer else None

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "predicted_task": self.predicted_task.name if self.predicted_task else None,
            "chosen_expert": self.chosen_expert.name,
            "classifier_raw": self.classifier_raw,
            "retrieval_hits": [list(h) for h in self.retrieval_hits] if self.retrieval_hits is not None else None,
            "expert_raw": self.expert_answer.raw if self.expert_answer else None,
            "choice": self.choice,
            "failed": self.failed,
            "errors": list(self.errors),
            "oracle": self.oracle,
        }

    @classmethod
    def from_json(cls, rec: Mapping) -> "RoutingDecision":
        answer = None if rec.get("failed") else ExpertAnswer(rec.get("expert_raw") or "", rec.get("choice"))
        hits = rec.get("retrieval_hits")
        return cls(
            question_id=rec["question_id"],
            predicted_task=TaskLabel(rec["predicted_task"]) if rec.get("predicted_task") else None,
            chosen_expert=ExpertRef(rec["chosen_expert"]),
            classifier_raw=rec.get("classifier_raw") or "",
            expert_answer=answer,
            retrieval_hits=tuple((h[0], float(h[1])) for h in hits) if hits is not None else None,
            errors=tuple(rec.get("errors") or ()),
            oracle=bool(rec.get("oracle", False)),
        )


@dataclass
class Pipeline:
    """Everything one routing run needs. Shared state here is read-only."""

    task_map: TaskExpertMap
    classifier: EndpointConfig
    classifier_provider: ChatProvider
    experts: Mapping[str, tuple[EndpointConfig, ChatProvider]]
    checkpoint: RunCheckpoint
    tasks: Sequence[TaskLabel] = ()
    kb: KnowledgeBase | None = None
    embedder: EmbeddingProvider | None = None
    k: int = DEFAULT_K
    normalize: bool = False
    exclude_self: bool = False
    oracle_classifier: bool = False
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self) -> None:
        if not self.tasks:
            self.tasks = self.task_map.tasks
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ConfigurationError("pipeline has no tasks")
        missing = [t.name for t in self.tasks if t not in self.task_map.entries]
        if missing:
            raise ConfigurationError(f"task-expert map has no entry for {missing}")
        needed = {e.name for e in self.task_map.entries.values()} | {self.task_map.unknown_expert.name}
        absent = sorted(needed - set(self.experts))
        if absent:
            raise ConfigurationError(f"no endpoint configured for experts {absent}")
        if self.kb is not None and self.embedder is None:
            raise ConfigurationError("a knowledge base needs an embedding provider for queries")
        if self.kb is not None and self.embedder.dim != self.kb.dim:
            raise ConfigurationError(f"embedding dim {self.embedder.dim} does not match knowledge base dim {self.kb.dim}")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")


def retrieve_context(
    q: Question,
    kb: KnowledgeBase,
    embedder: EmbeddingProvider,
    k: int = DEFAULT_K,
    *,
    normalize: bool = False,
    exclude_self: bool = False,
) -> RetrievalResult:
    vec = encode(question_block(q), embedder, normalize=normalize)
    return retrieve(vec, kb, k, exclude_id=q.id if exclude_self else None)


def classify(
    q: Question,
    tasks: Sequence[TaskLabel],
    cfg: EndpointConfig,
    provider: ChatProvider,
    *,
    kb: KnowledgeBase | None = None,
    embedder: EmbeddingProvider | None = None,
    k: int = DEFAULT_K,
    context: RetrievalResult | None = None,
    exclude_self: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> ClassifierOutput:
    """Ask the classifier model for ``q``'s task.

    Uses the plain prompt, or the retrieval-augmented one when a knowledge
    base (or a precomputed ``context``) is supplied. The result is one of
    ``tasks`` or unknown.
    """
    if not tasks:
        raise ValueError("task list must not be empty")
    if context is None and kb is not None:
        if embedder is None:
            raise ConfigurationError("retrieval needs an embedding provider")
        context = retrieve_context(q, kb, embedder, k, exclude_self=exclude_self)
    prompt = render_classifier_prompt(q, tasks, context)
    return parse_classifier(complete(prompt, cfg, provider, sleep=sleep), tasks)


def route(q: Question, task_map: TaskExpertMap, prediction: ClassifierOutput) -> ExpertRef:
    return task_map.expert_for(prediction.predicted)


def _canonical(tasks: Sequence[TaskLabel], label: TaskLabel | None) -> TaskLabel | None:
    if label is None:
        return None
    for t in tasks:
        if t == label:
            return t
    return None


def _stage_classify(q: Question, p: Pipeline) -> tuple[ClassifierOutput, tuple | None, list[str]]:
    if p.oracle_classifier:
        gold = _canonical(p.tasks, q.gold_task)
        if gold is None:
            raise ConfigurationError(f"oracle classifier: gold task {q.gold_task} is not a pipeline task")
        return ClassifierOutput("", gold), None, []

    done = p.checkpoint.get(q.id, "classify")
    if done is not None:
        parsed = done.parsed or {}
        label = _canonical(p.tasks, TaskLabel(parsed["task"])) if parsed.get("task") else None
        hits = parsed.get("hits")
        errors = [parsed["error"]] if parsed.get("error") else []
        return ClassifierOutput(done.raw, label), tuple((h[0], h[1]) for h in hits) if hits is not None else None, errors

    hits = None
    errors: list[str] = []
    try:
        context = None
        if p.kb is not None:
            context = retrieve_context(q, p.kb, p.embedder, p.k, normalize=p.normalize, exclude_self=p.exclude_self)
            hits = tuple((h.record.question_id, h.similarity) for h in context.hits)
        out = classify(q, p.tasks, p.classifier, p.classifier_provider, context=context, sleep=p.sleep)
    except TransportError as exc:
        # fall back to the unknown expert rather than dropping the question
        log.warning("classifier failed on %s: %s", q.id, exc)
        errors.append(f"classify: {exc}")
        out = ClassifierOutput("", None)
    parsed = {
        "task": out.predicted.name if out.predicted else None,
        "hits": [list(h) for h in hits] if hits is not None else None,
    }
    if errors:
        parsed["error"] = errors[0]
    p.checkpoint.append(q.id, "classify", out.raw, parsed)
    return out, hits, errors


def _stage_answer(q: Question, expert: ExpertRef, p: Pipeline) -> tuple[ExpertAnswer | None, list[str]]:
    done = p.checkpoint.get(q.id, "answer")
    if done is not None:
        parsed = done.parsed or {}
        if parsed.get("expert") != expert.name:
            raise IntegrityError(
                f"checkpoint answered {q.id} with {parsed.get('expert')!r} but routing now selects {expert.name!r}"
            )
        return ExpertAnswer(done.raw, parsed.get("choice")), []
    cfg, provider = p.experts[expert.name]
    try:
        raw = complete(render_expert_prompt(q), cfg, provider, sleep=p.sleep)
    except TransportError as exc:
        log.warning("expert %s failed on %s: %s", expert.name, q.id, exc)
        return None, [f"answer: {exc}"]
    ans = parse_expert(raw)
    p.checkpoint.append(q.id, "answer", raw, {"expert": expert.name, "choice": ans.choice})
    return ans, []


def answer(q: Question, p: Pipeline) -> RoutingDecision:
    """Run both stages for one question, reusing checkpointed stages."""
    out, hits, errors = _stage_classify(q, p)
    expert = route(q, p.task_map, out)
    ans, more = _stage_answer(q, expert, p)
    return RoutingDecision(
        question_id=q.id,
        predicted_task=out.predicted,
        chosen_expert=expert,
        classifier_raw=out.raw,
        expert_answer=ans,
        retrieval_hits=hits,
        errors=tuple(errors + more),
        oracle=p.oracle_classifier,
    )


def run_pipeline(questions: Iterable[Question], p: Pipeline, parallelism: int = 1) -> list[RoutingDecision]:
    """Route every question; output order follows input order."""
    qs = list(questions)
    if parallelism <= 1:
        return [answer(q, p) for q in qs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda q: answer(q, p), qs))


def classify_all(
    questions: Iterable[Question], p: Pipeline, parallelism: int = 1
) -> list[tuple[str, TaskLabel | None, str, tuple | None]]:
    """Classification stage only: (question id, predicted, raw, hits) per question."""

    def one(q: Question):
        out, hits, _ = _stage_classify(q, p)
        return q.id, out.predicted, out.raw, hits

    qs = list(questions)
    if parallelism <= 1:
        return [one(q) for q in qs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, qs))


def write_decisions(decisions: Iterable[RoutingDecision], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")


def read_decisions(path: str | Path) -> list[RoutingDecision]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(RoutingDecision.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IntegrityError(f"{path}: bad decision record on line {lineno} ({exc})") from None
    return out


def decision_is_consistent(d: RoutingDecision, task_map: TaskExpertMap) -> bool:
    return d.chosen_expert.name == task_map.expert_for(d.predicted_task).name

