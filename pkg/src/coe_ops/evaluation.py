"""Scoring of answer logs, decision logs and classifier predictions.

Precision, recall and F1 are computed per class and combined with support
weights by default (``average="macro"`` is available for comparison).
Unparsed answers and "unknown" task predictions are counted as wrong: they
sit in the denominator but never in any class's true positives.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import OPTION_LETTERS, Dataset, TaskLabel
from .errors import ConfigurationError, IntegrityError
from .leaderboard import TaskExpertMap

UNPARSED = "UNPARSED"
UNKNOWN = "UNKNOWN"
METRIC_HEADER = ("subject", "n", "accuracy", "precision", "recall", "f1")
BASELINE_KINDS = ("single-expert", "random-coe", "oracle-router", "coe")


@dataclass
class EvalReport:
    subject: str
    n: int
    correct: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_task: dict[str, float]
    labels: list[str]  # confusion rows (gold classes)
    columns: list[str]  # confusion columns (predicted classes + the sink column)
    confusion: list[list[int]]
    kind: str = "qa"
    average: str = "weighted"
    extra: dict = field(default_factory=dict)

    def metrics_row(self) -> list:
        return [self.subject, self.n, self.accuracy, self.precision, self.recall, self.f1]

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "kind": self.kind,
            "average": self.average,
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_task": dict(self.per_task),
            "labels": list(self.labels),
            "columns": list(self.columns),
            "confusion": [list(r) for r in self.confusion],
        }


def prf(confusion: np.ndarray, average: str = "weighted") -> tuple[float, float, float]:
    """Precision/recall/F1 from a (classes x classes+1) confusion matrix.

    The last column holds predictions outside every class. Zero divisions
    yield 0 for that class.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    k = cm.shape[0]
    tp = np.diag(cm[:, :k]).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm[:, :k].sum(axis=0).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(predicted > 0, tp / predicted, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    if average == "weighted":
        total = support.sum()
        if total == 0:
            return 0.0, 0.0, 0.0
        w = support / total
    elif average == "macro":
        present = support > 0
        if not present.any():
            return 0.0, 0.0, 0.0
        w = present / present.sum()
    else:
        raise ValueError(f"unknown average {average!r}")
    return float(p @ w), float(r @ w), float(f @ w)


def _pairs(log: Iterable) -> list[tuple[str, object]]:
    out = []
    for item in log:
        if hasattr(item, "question_id"):
            out.append((item.question_id, item.choice))
        else:
            qid, pred = item
            out.append((qid, pred))
    return out


def _check_ids(pairs: Sequence[tuple[str, object]], d: Dataset) -> None:
    seen = set()
    for qid, _ in pairs:
        if qid not in d:
            raise IntegrityError(f"unknown question id {qid!r}")
        if qid in seen:
            raise IntegrityError(f"question {qid!r} scored twice")
        seen.add(qid)


def score_qa(log: Iterable, d: Dataset, subject: str = "", average: str = "weighted") -> EvalReport:
    """Score (question id, letter-or-None) pairs or routing decisions."""
    pairs = _pairs(log)
    _check_ids(pairs, d)
    idx = {c: i for i, c in enumerate(OPTION_LETTERS)}
    cm = np.zeros((4, 5), dtype=np.int64)
    task_hits: dict[TaskLabel, list[int]] = {}
    for qid, pred in pairs:
        q = d.get(qid)
        col = idx.get(pred, 4) if isinstance(pred, str) else 4
        cm[idx[q.gold_answer], col] += 1
        tally = task_hits.setdefault(q.gold_task, [0, 0])
        tally[0] += pred == q.gold_answer
        tally[1] += 1
    n = len(pairs)
    correct = int(np.trace(cm[:, :4]))
    p, r, f = prf(cm, average)
    per_task = {t.name: task_hits[t][0] / task_hits[t][1] for t in d.tasks if t in task_hits}
    return EvalReport(
        subject, n, correct, correct / n if n else 0.0, p, r, f, per_task,
        list(OPTION_LETTERS), [*OPTION_LETTERS, UNPARSED], cm.tolist(), "qa", average,
    )


def score_classification(
    predictions: Iterable[tuple[str, TaskLabel | None]],
    d: Dataset,
    subject: str = "",
    average: str = "weighted",
) -> EvalReport:
    """Score task predictions; ``None`` (unknown) lands in an extra column."""
    pairs = list(predictions)
    _check_ids(pairs, d)
    tasks = list(d.tasks)
    idx = {t: i for i, t in enumerate(tasks)}
    k = len(tasks)
    cm = np.zeros((k, k + 1), dtype=np.int64)
    for qid, pred in pairs:
        gold = d.get(qid).gold_task
        col = idx.get(pred, k) if pred is not None else k
        cm[idx[gold], col] += 1
    n = len(pairs)
    correct = int(np.trace(cm[:, :k]))
    p, r, f = prf(cm, average)
    rows = cm.sum(axis=1)
    per_task = {t.name: float(cm[i, i] / rows[i]) for i, t in enumerate(tasks) if rows[i]}
    return EvalReport(
        subject, n, correct, correct / n if n else 0.0, p, r, f, per_task,
        [t.name for t in tasks], [*(t.name for t in tasks), UNKNOWN], cm.tolist(), "classification", average,
    )


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    seed: int | None = None
    expert: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}")
        if (self.seed is not None) != (self.kind == "random-coe"):
            raise ConfigurationError("a seed is required for random-coe and only for random-coe")
        if self.kind == "single-expert" and not self.expert:
            raise ConfigurationError("single-expert baseline needs an expert name")

    @classmethod
    def parse(cls, text: str) -> "BaselineSpec":
        """``random-coe:SEED``, ``single-expert:NAME``, ``oracle-router``."""
        kind, _, arg = text.partition(":")
        if kind == "random-coe":
            try:
                return cls(kind, seed=int(arg))
            except ValueError:
                raise ConfigurationError(f"random-coe needs an integer seed, got {arg!r}") from None
        if kind == "single-expert":
            return cls(kind, expert=arg or None)
        return cls(kind)

    @property
    def label(self) -> str:
        if self.kind == "random-coe":
            return f"Random-CoE(seed={self.seed})"
        if self.kind == "single-expert":
            return str(self.expert)
        return self.kind


def run_baseline(
    spec: BaselineSpec,
    answers: Mapping[str, Mapping[str, str | None]],
    d: Dataset,
    task_map: TaskExpertMap | None = None,
    *,
    pool: Sequence[str] | None = None,
    average: str = "weighted",
) -> EvalReport:
    """Score a routing policy using answers every expert already gave.

    ``answers[expert][question_id]`` is that expert's parsed letter. Random
    routing draws one expert per question, in dataset order, from
    ``random.Random(seed)`` over ``pool`` (default: all experts in
    ``answers``).
    """
    names = list(pool) if pool is not None else list(answers)
    if not names:
        raise ConfigurationError("baseline needs at least one expert")
    for name in names:
        if name not in answers:
            raise ConfigurationError(f"no answer log for expert {name!r}")

    def pick(expert: str, qid: str) -> str | None:
        return answers[expert].get(qid)

    if spec.kind == "single-expert":
        if spec.expert not in answers:
            raise ConfigurationError(f"no answer log for expert {spec.expert!r}")
        log = [(q.id, pick(spec.expert, q.id)) for q in d.questions]
    elif spec.kind == "random-coe":
        rng = random.Random(spec.seed)
        log = [(q.id, pick(names[rng.randrange(len(names))], q.id)) for q in d.questions]
    elif spec.kind == "oracle-router":
        if task_map is None:
            raise ConfigurationError("oracle-router baseline needs a task-expert map")
        log = [(q.id, pick(task_map.expert_for(q.gold_task).name, q.id)) for q in d.questions]
    else:
        raise ConfigurationError("the coe kind is scored from a decision log with score_qa")
    return score_qa(log, d, subject=spec.label, average=average)


# --- exports ---------------------------------------------------------------


def export_metrics_table(reports: Sequence[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        for r in reports:
            w.writerow([r.subject, r.n, *(f"{v:.6f}" for v in (r.accuracy, r.precision, r.recall, r.f1))])
    return path


def heatmap_data(report: EvalReport) -> dict:
    rates = []
    for row in report.confusion:
        total = sum(row)
        rates.append([v / total if total else 0.0 for v in row])
    return {
        "subject": report.subject,
        "kind": report.kind,
        "rows": list(report.labels),
        "columns": list(report.columns),
        "counts": [list(r) for r in report.confusion],
        "row_totals": [sum(r) for r in report.confusion],
        "rates": rates,
    }


def radar_data(reports: Sequence[EvalReport]) -> dict:
    axes: list[str] = []
    for r in reports:
        for t in r.per_task:
            if t not in axes:
                axes.append(t)
    return {
        "axes": axes,
        "series": [{"subject": r.subject, "values": [r.per_task.get(a) for a in axes]} for r in reports],
    }


def export_report(
    report: EvalReport | Sequence[EvalReport],
    kind: str,
    path: str | Path,
) -> Path:
    """Write plot-ready data.

    ``metrics-table`` is CSV. ``confusion-heatmap-data`` is JSON (one report).
    ``radar-data`` is CSV with one row per task axis when ``path`` ends in
    ``.csv``, JSON otherwise.
    """
    reports = [report] if isinstance(report, EvalReport) else list(report)
    path = Path(path)
    if kind == "metrics-table":
        return export_metrics_table(reports, path)
    if kind == "confusion-heatmap-data":
        if len(reports) != 1:
            raise ValueError("heatmap export takes exactly one report")
        path.write_text(json.dumps(heatmap_data(reports[0]), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path
    if kind == "radar-data":
        data = radar_data(reports)
        if path.suffix.lower() == ".csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["task", *(s["subject"] for s in data["series"])])
                for i, axis in enumerate(data["axes"]):
                    w.writerow([axis, *("" if s["values"][i] is None else f"{s['values'][i]:.6f}" for s in data["series"])])
        else:
            path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path
    raise ValueError(f"unknown export kind {kind!r}")
