"""Capability matrix and task-to-expert mapping.

The matrix holds per-(expert, task) answer accuracy measured on a labelled
benchmark. The mapping sends each task to the column winner and keeps one
extra expert (best count-weighted overall accuracy) for questions the
classifier refuses to label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import Dataset, TaskLabel
from .errors import ConfigurationError, CoverageError, IntegrityError

MATRIX_FORMAT = "coe-ops/capability-matrix"
MAP_FORMAT = "coe-ops/task-expert-map"
FORMAT_VERSION = 1

# (question id, predicted letter or None for unparsed)
AnswerLog = Sequence[tuple[str, "str | None"]]


@dataclass(frozen=True)
class ExpertRef:
    name: str
    endpoint: str | None = None

    def to_json(self) -> dict:
        return {"name": self.name, "endpoint": self.endpoint}

    @classmethod
    def from_json(cls, data: Mapping | str) -> "ExpertRef":
        if isinstance(data, str):
            return cls(data)
        return cls(data["name"], data.get("endpoint"))


def _check_unique(experts: Sequence[ExpertRef]) -> None:
    names = [e.name for e in experts]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigurationError(f"duplicate expert names: {dupes}")


@dataclass(frozen=True)
class CapabilityMatrix:
    experts: tuple[ExpertRef, ...]
    tasks: tuple[TaskLabel, ...]
    cells: tuple[tuple[float, ...], ...]  # cells[expert][task]
    counts: tuple[int, ...]
    correct: tuple[tuple[int, ...], ...] | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "cells", tuple(tuple(float(v) for v in row) for row in self.cells))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.correct is not None:
            object.__setattr__(self, "correct", tuple(tuple(int(v) for v in row) for row in self.correct))
        _check_unique(self.experts)
        if len(self.cells) != len(self.experts) or any(len(r) != len(self.tasks) for r in self.cells):
            raise ConfigurationError("capability matrix shape does not match experts x tasks")
        if len(self.counts) != len(self.tasks):
            raise ConfigurationError("capability matrix counts do not match task list")
        for row in self.cells:
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise ConfigurationError(f"accuracy {v} outside [0, 1]")

    def cell(self, expert: str, task: TaskLabel | str) -> float:
        return self.cells[self.expert_index(expert)][self.task_index(task)]

    def expert_index(self, name: str) -> int:
        for i, e in enumerate(self.experts):
            if e.name == name:
                return i
        raise ConfigurationError(f"unknown expert {name!r}")

    def task_index(self, task: TaskLabel | str) -> int:
        label = task if isinstance(task, TaskLabel) else TaskLabel(task)
        for i, t in enumerate(self.tasks):
            if t == label:
                return i
        raise ConfigurationError(f"unknown task {label}")

    def overall(self, expert: str) -> float:
        """Count-weighted accuracy of one expert over every benchmark question."""
        i = self.expert_index(expert)
        total = sum(self.counts)
        if total == 0:
            raise ConfigurationError("capability matrix has zero total count")
        return sum(n * c for n, c in zip(self.counts, self.cells[i])) / total

    def to_json(self) -> dict:
        doc = {
            "format": MATRIX_FORMAT,
            "version": FORMAT_VERSION,
            "experts": [e.to_json() for e in self.experts],
            "tasks": [t.name for t in self.tasks],
            "counts": list(self.counts),
            "cells": [list(r) for r in self.cells],
            "provenance": dict(self.provenance),
        }
        if self.correct is not None:
            doc["correct"] = [list(r) for r in self.correct]
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "CapabilityMatrix":
        if doc.get("format") != MATRIX_FORMAT:
            raise ConfigurationError(f"not a capability matrix document (format={doc.get('format')!r})")
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported capability matrix version {doc.get('version')!r}")
        return cls(
            experts=tuple(ExpertRef.from_json(e) for e in doc["experts"]),
            tasks=tuple(TaskLabel(t) for t in doc["tasks"]),
            cells=doc["cells"],
            counts=doc["counts"],
            correct=doc.get("correct"),
            provenance=dict(doc.get("provenance") or {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CapabilityMatrix":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TaskExpertMap:
    entries: Mapping[TaskLabel, ExpertRef]
    unknown_expert: ExpertRef
    pool: tuple[ExpertRef, ...] = ()
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(self.entries))
        if not self.pool:
            pool = tuple(dict.fromkeys([*self.entries.values(), self.unknown_expert]))
            object.__setattr__(self, "pool", pool)
        else:
            object.__setattr__(self, "pool", tuple(self.pool))
        _check_unique(self.pool)

    @property
    def tasks(self) -> tuple[TaskLabel, ...]:
        return tuple(self.entries)

    def expert_for(self, task: TaskLabel | None) -> ExpertRef:
        if task is None:
            return self.unknown_expert
        try:
            return self.entries[task]
        except KeyError:
            raise ConfigurationError(f"task {task} has no entry in the task-expert map") from None

    def to_json(self) -> dict:
        return {
            "format": MAP_FORMAT,
            "version": FORMAT_VERSION,
            "tasks": [t.name for t in self.entries],
            "entries": {t.name: e.name for t, e in self.entries.items()},
            "unknown_expert": self.unknown_expert.name,
            "experts": [e.to_json() for e in self.pool],
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "TaskExpertMap":
        if doc.get("format") != MAP_FORMAT:
            raise ConfigurationError(f"not a task-expert map document (format={doc.get('format')!r})")
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported task-expert map version {doc.get('version')!r}")
        pool = tuple(ExpertRef.from_json(e) for e in doc.get("experts", ()))
        by_name = {e.name: e for e in pool}

        def ref(name: str) -> ExpertRef:
            return by_name.get(name) or ExpertRef(name)

        entries = {TaskLabel(t): ref(e) for t, e in doc["entries"].items()}
        order = [TaskLabel(t) for t in doc.get("tasks", doc["entries"])]
        entries = {t: entries[t] for t in order}
        return cls(entries, ref(doc["unknown_expert"]), pool, dict(doc.get("provenance") or {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TaskExpertMap":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def compute_accuracy(answers: AnswerLog, d: Dataset, task: TaskLabel | str) -> float:
    """Fraction of ``task``'s questions answered correctly.

    Questions missing from ``answers`` and answers of ``None`` count as wrong.
    """
    correct, n = _count_correct(answers, d, task)
    return correct / n


def _count_correct(answers: AnswerLog, d: Dataset, task: TaskLabel | str) -> tuple[int, int]:
    label = d.task(task)
    members = {q.id: q for q in d.questions_for(label)}
    if not members:
        raise ConfigurationError(f"task {label} has no questions")
    seen: dict[str, str | None] = {}
    for qid, pred in answers:
        if qid not in members:
            if qid in d:
                raise IntegrityError(f"question {qid!r} belongs to task {d.get(qid).gold_task}, not {label}")
            raise IntegrityError(f"unknown question id {qid!r}")
        seen[qid] = pred
    correct = sum(1 for qid, q in members.items() if seen.get(qid) == q.gold_answer)
    return correct, len(members)


def build_matrix(
    logs: Mapping[str, AnswerLog],
    d: Dataset,
    experts: Sequence[ExpertRef] | None = None,
    provenance: Mapping | None = None,
) -> CapabilityMatrix:
    """Turn per-expert answer logs into a capability matrix.

    Every expert must have answered at least one question of every task;
    otherwise a :class:`CoverageError` lists the missing (expert, task) pairs.
    """
    if experts is None:
        experts = [ExpertRef(name) for name in logs]
    missing: list[tuple[str, str]] = []
    split_logs: dict[str, dict[TaskLabel, list]] = {}
    for e in experts:
        per_task: dict[TaskLabel, list] = {t: [] for t in d.tasks}
        for qid, pred in logs.get(e.name, ()):
            per_task[d.get(qid).gold_task].append((qid, pred))
        split_logs[e.name] = per_task
        missing.extend((e.name, t.name) for t in d.tasks if not per_task[t])
    if missing:
        raise CoverageError(f"answer logs missing {len(missing)} (expert, task) pairs: {missing}", missing)

    correct = []
    cells = []
    for e in experts:
        row_c, row_v = [], []
        for t in d.tasks:
            k, n = _count_correct(split_logs[e.name][t], d, t)
            row_c.append(k)
            row_v.append(k / n)
        correct.append(tuple(row_c))
        cells.append(tuple(row_v))
    prov = {"dataset": d.name, "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    splits = sorted({q.split for q in d.questions})
    if splits:
        prov["splits"] = splits
    prov.update(provenance or {})
    counts = tuple(len(d.questions_for(t)) for t in d.tasks)
    return CapabilityMatrix(tuple(experts), d.tasks, tuple(cells), counts, tuple(correct), prov)


def _argmax_first(values: Iterable[float]) -> int:
    best_i, best_v = -1, float("-inf")
    for i, v in enumerate(values):
        if v > best_v:
            best_i, best_v = i, v
    return best_i


def select_best(matrix: CapabilityMatrix) -> dict[TaskLabel, ExpertRef]:
    """Column-wise argmax; ties go to the expert listed first."""
    if not matrix.experts:
        raise ConfigurationError("capability matrix has no experts")
    out = {}
    for j, t in enumerate(matrix.tasks):
        out[t] = matrix.experts[_argmax_first(row[j] for row in matrix.cells)]
    return out


def select_unknown(matrix: CapabilityMatrix) -> ExpertRef:
    """Expert with the highest count-weighted accuracy over all tasks."""
    if not matrix.experts:
        raise ConfigurationError("capability matrix has no experts")
    total = sum(matrix.counts)
    if total <= 0:
        raise ConfigurationError("capability matrix has zero total count")
    if matrix.correct is not None:
        # integer sums keep the comparison exact
        scores = [sum(row) for row in matrix.correct]
    else:
        scores = [sum(n * c for n, c in zip(matrix.counts, row)) / total for row in matrix.cells]
    return matrix.experts[_argmax_first(scores)]


def check_pool_bounds(n_expert: int, n_task: int) -> None:
    if not 2 <= n_expert <= n_task:
        raise ConfigurationError(
            f"candidate expert pool of {n_expert} violates 2 <= N_expert <= N_task (N_task={n_task})"
        )


def build_task_expert_map(matrix: CapabilityMatrix, *, enforce_pool_bounds: bool = True) -> TaskExpertMap:
    """Assemble the routing table from a complete capability matrix.

    With ``enforce_pool_bounds`` the candidate pool must hold between two
    experts and one expert per task.
    """
    if enforce_pool_bounds:
        check_pool_bounds(len(matrix.experts), len(matrix.tasks))
    prov = dict(matrix.provenance)
    prov["source"] = "capability-matrix"
    return TaskExpertMap(select_best(matrix), select_unknown(matrix), matrix.experts, prov)
