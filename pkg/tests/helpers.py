from __future__ import annotations

import random
from pathlib import Path

from coe_ops.dataset import OPTION_LETTERS, Dataset, Question, TaskLabel
from coe_ops.leaderboard import ExpertRef, TaskExpertMap
from coe_ops.llm_client import EndpointConfig, RunCheckpoint
from coe_ops.router import Pipeline

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

ENGLISH_TASKS = [
    "LogParser",
    "RootCauseAnalysis",
    "TimeSeriesAnomalyDetection",
    "TimeSeriesClassification",
    "TimeSeriesForecasting",
]
CHINESE_TASKS = ["Build", "Code", "Deploy", "Monitor", "Operate", "Plan", "Release", "Test"]

# per-task vocabulary so lexical embeddings cluster by task
TASK_WORDS = {
    "Build": "compile artifact maven gradle dependency",
    "Code": "function refactor variable syntax review",
    "Deploy": "rollout kubernetes helm canary replica",
    "Monitor": "metric alert dashboard prometheus threshold",
    "Operate": "incident oncall runbook restart capacity",
    "Plan": "roadmap sprint backlog estimate milestone",
    "Release": "version changelog tag semver publish",
    "Test": "unittest coverage assertion fixture mock",
}


def make_question(
    qid: str,
    task: str = "Code",
    answer: str = "A",
    stem: str | None = None,
    split: str = "test",
) -> Question:
    return Question(
        id=qid,
        stem=stem or f"Question {qid} about {task}?",
        options={k: f"option {k} for {qid}" for k in OPTION_LETTERS},
        gold_answer=answer,
        gold_task=TaskLabel(task),
        split=split,
    )


def synthetic_dataset(
    counts: dict[str, int],
    *,
    seed: int = 0,
    split: str = "test",
    name: str = "synthetic",
    prefix: str = "",
) -> Dataset:
    """Questions whose stems reuse their task's vocabulary; gold letters seeded."""
    rng = random.Random(seed)
    qs = []
    for task, n in counts.items():
        words = TASK_WORDS.get(task, f"{task.lower()} alpha beta gamma delta").split()
        for i in range(n):
            picked = " ".join(rng.sample(words, 3))
            qs.append(make_question(f"{prefix}{task}-{i}", task, rng.choice(OPTION_LETTERS), f"{picked} question {i}?", split))
    return Dataset(name, tuple(TaskLabel(t) for t in counts), tuple(qs))


def endpoint(name: str, **kw) -> EndpointConfig:
    kw.setdefault("max_retries", 0)
    kw.setdefault("backoff", 0.0)
    return EndpointConfig(name=name, **kw)


def simple_map(entries: dict[str, str], unknown: str) -> TaskExpertMap:
    return TaskExpertMap({TaskLabel(t): ExpertRef(e) for t, e in entries.items()}, ExpertRef(unknown))


def make_pipeline(
    task_map: TaskExpertMap,
    classifier_provider,
    expert_providers: dict,
    *,
    checkpoint_path=None,
    run_id: str = "test",
    **kw,
) -> Pipeline:
    return Pipeline(
        task_map=task_map,
        classifier=endpoint("classifier"),
        classifier_provider=classifier_provider,
        experts={name: (endpoint(name), prov) for name, prov in expert_providers.items()},
        checkpoint=RunCheckpoint(checkpoint_path, run_id),
        sleep=lambda s: None,
        **kw,
    )
