"""Multiple-choice benchmark loading (DevOps-Eval layout and a JSONL variant)."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import IntegrityError, RowError, SchemaError

OPTION_LETTERS = ("A", "B", "C", "D")
SPLITS = ("eval", "test")
DEFAULT_COLUMNS = {
    "id": "id",
    "question": "question",
    "A": "A",
    "B": "B",
    "C": "C",
    "D": "D",
    "answer": "answer",
}

# Suffixes DevOps-Eval style files use to mark their split, e.g. "LogParser_dev.csv".
_SPLIT_ALIASES = {"dev": "eval", "eval": "eval", "val": "eval", "test": "test"}
_SPLIT_SUFFIX = re.compile(r"^(?P<task>.+?)[_\-.](?P<split>dev|eval|val|test)$", re.IGNORECASE)


@dataclass(frozen=True, eq=False)
class TaskLabel:
    """A task name compared case-insensitively, displayed as written."""

    name: str

    def __post_init__(self) -> None:
        stripped = self.name.strip() if isinstance(self.name, str) else ""
        if not stripped:
            raise ValueError("task label must be non-empty")
        object.__setattr__(self, "name", stripped)

    @property
    def key(self) -> str:
        return self.name.casefold()

    def __eq__(self, other: object) -> bool:
        if isinstance(other, TaskLabel):
            return self.key == other.key
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.key)

    def __str__(self) -> str:
        return self.name

    def __repr__(self) -> str:
        return f"TaskLabel({self.name!r})"


@dataclass(frozen=True)
class Question:
    id: str
    stem: str
    options: Mapping[str, str]
    gold_answer: str
    gold_task: TaskLabel
    split: str = "test"

    def __post_init__(self) -> None:
        if tuple(self.options) != OPTION_LETTERS:
            raise ValueError(f"question {self.id}: options must be exactly A-D, got {list(self.options)}")
        if self.gold_answer not in OPTION_LETTERS:
            raise ValueError(f"question {self.id}: gold answer {self.gold_answer!r} not in A-D")
        if self.split not in SPLITS:
            raise ValueError(f"question {self.id}: unknown split {self.split!r}")
        # freeze the mapping so Question stays hashable-by-value in spirit
        object.__setattr__(self, "options", dict(self.options))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "question": self.stem,
            **{k: self.options[k] for k in OPTION_LETTERS},
            "answer": self.gold_answer,
            "task": self.gold_task.name,
            "split": self.split,
        }


@dataclass(frozen=True)
class Dataset:
    name: str
    tasks: tuple[TaskLabel, ...]
    questions: tuple[Question, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "questions", tuple(self.questions))
        if len(set(self.tasks)) != len(self.tasks):
            raise IntegrityError(f"dataset {self.name}: duplicate task labels")
        by_id: dict[str, Question] = {}
        for q in self.questions:
            if q.id in by_id:
                raise IntegrityError(f"dataset {self.name}: duplicate question id {q.id!r}")
            by_id[q.id] = q
        object.__setattr__(self, "_by_id", by_id)
        known = set(self.tasks)
        for q in self.questions:
            if q.gold_task not in known:
                raise IntegrityError(f"question {q.id}: task {q.gold_task} not in dataset task list")
        counts = Counter(q.gold_task for q in self.questions)
        empty = [t.name for t in self.tasks if counts[t] == 0]
        if empty:
            raise IntegrityError(f"dataset {self.name}: tasks without questions: {empty}")

    def __len__(self) -> int:
        return len(self.questions)

    def get(self, question_id: str) -> Question:
        try:
            return self._by_id[question_id]
        except KeyError:
            raise IntegrityError(f"unknown question id {question_id!r} in dataset {self.name}") from None

    def __contains__(self, question_id: object) -> bool:
        return question_id in self._by_id

    def task(self, name: str | TaskLabel) -> TaskLabel:
        """Return the dataset's own label (with its display casing) for ``name``."""
        label = name if isinstance(name, TaskLabel) else TaskLabel(name)
        for t in self.tasks:
            if t == label:
                return t
        raise IntegrityError(f"task {label} not in dataset {self.name}")

    def questions_for(self, task: TaskLabel | str) -> list[Question]:
        label = self.task(task)
        return [q for q in self.questions if q.gold_task == label]

    def filter(self, split: str | None = None, tasks: Iterable[TaskLabel] | None = None) -> "Dataset":
        keep_tasks = set(tasks) if tasks is not None else None
        qs = [
            q
            for q in self.questions
            if (split is None or q.split == split) and (keep_tasks is None or q.gold_task in keep_tasks)
        ]
        present = {q.gold_task for q in qs}
        return Dataset(self.name, tuple(t for t in self.tasks if t in present), tuple(qs))


def task_counts(d: Dataset) -> dict[TaskLabel, int]:
    counts = Counter(q.gold_task for q in d.questions)
    return {t: counts[t] for t in d.tasks if counts[t]}


def normalize_split(value: str | None, default: str = "test") -> str:
    if value is None or not str(value).strip():
        return default
    key = str(value).strip().lower()
    if key not in _SPLIT_ALIASES:
        raise ValueError(f"unknown split {value!r}")
    return _SPLIT_ALIASES[key]


def infer_task_and_split(path: Path) -> tuple[str, str | None]:
    """Derive (task, split) from a DevOps-Eval style file name.

    ``LogParser_dev.csv`` gives ("LogParser", "eval"); ``test/Code.csv`` gives
    ("Code", "test") from the parent directory.
    """
    stem = path.stem
    m = _SPLIT_SUFFIX.match(stem)
    if m:
        return m.group("task"), _SPLIT_ALIASES[m.group("split").lower()]
    parent = path.parent.name.lower()
    return stem, _SPLIT_ALIASES.get(parent)


def _make_question(row: Mapping[str, str], index: int, *, task: str, split: str, qid: str) -> Question:
    answer = (row.get("answer") or "").strip().upper()
    if answer not in OPTION_LETTERS:
        raise RowError(f"gold answer {row.get('answer')!r} is not one of A-D", index)
    try:
        label = TaskLabel(task)
    except ValueError:
        raise RowError("empty task label", index) from None
    stem = row.get("question")
    if stem is None or not str(stem).strip():
        raise RowError("empty question text", index)
    if not qid:
        raise RowError("empty question id", index)
    return Question(
        id=qid,
        stem=str(stem),
        options={k: str(row.get(k) or "") for k in OPTION_LETTERS},
        gold_answer=answer,
        gold_task=label,
        split=split,
    )


def _read_csv(
    path: Path,
    *,
    task: str | None,
    split: str | None,
    columns: Mapping[str, str],
    id_prefix: str = "",
    delimiter: str | None = None,
) -> list[Question]:
    inferred_task, inferred_split = infer_task_and_split(path)
    task = task or inferred_task
    split = normalize_split(split or inferred_split)
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() == ".tsv" else ","
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for logical, actual in columns.items():
            if actual not in header:
                raise SchemaError(f"{path}: missing column {actual!r}", column=actual)
        out = []
        for i, raw in enumerate(reader, start=1):
            row = {logical: raw.get(actual) for logical, actual in columns.items()}
            qid = (row["id"] or "").strip()
            out.append(_make_question(row, i, task=task, split=split, qid=f"{id_prefix}{qid}" if qid else ""))
    return out


def _read_jsonl(path: Path, *, split: str | None, task: str | None) -> list[Question]:
    out = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RowError(f"invalid JSON ({exc.msg})", i) from None
            for name in ("id", "question", *OPTION_LETTERS, "answer"):
                if name not in rec:
                    raise SchemaError(f"{path} row {i}: missing field {name!r}", column=name)
            rec_task = task or rec.get("task")
            if not rec_task:
                raise SchemaError(f"{path} row {i}: missing field 'task'", column="task")
            try:
                rec_split = normalize_split(rec.get("split") or split)
            except ValueError as exc:
                raise RowError(str(exc), i) from None
            rec = {k: (str(v) if v is not None else None) for k, v in rec.items()}
            out.append(_make_question(rec, i, task=rec_task, split=rec_split, qid=str(rec["id"]).strip()))
    return out


def load_dataset(
    path: str | Path | Sequence[str | Path],
    *,
    fmt: str | None = None,
    task: str | None = None,
    split: str | None = None,
    tasks: Sequence[str] | None = None,
    columns: Mapping[str, str] | None = None,
    name: str | None = None,
) -> Dataset:
    """Load and validate a benchmark.

    ``path`` may be a single ``.csv``/``.tsv``/``.jsonl`` file, a directory of
    per-task files (searched recursively), or a list of files. When several
    delimited files are combined, question ids are prefixed with the file
    stem (``LogParser_test/17``) because DevOps-Eval numbers each file from 1.

    The task list follows first-appearance order unless ``tasks`` is given.
    """
    if isinstance(path, (str, Path)):
        root = Path(path)
        if root.is_dir():
            files = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".csv", ".tsv", ".jsonl"))
        else:
            if not root.exists():
                raise FileNotFoundError(root)
            files = [root]
        ds_name = name or root.stem
    else:
        files = [Path(p) for p in path]
        ds_name = name or "+".join(p.stem for p in files)

    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)

    multi = len(files) > 1
    questions: list[Question] = []
    for f in files:
        kind = fmt or ("jsonl" if f.suffix.lower() == ".jsonl" else "csv")
        if kind == "jsonl":
            questions.extend(_read_jsonl(f, split=split, task=task))
        elif kind in ("csv", "tsv"):
            prefix = f"{f.stem}/" if multi else ""
            questions.extend(_read_csv(f, task=task, split=split, columns=cols, id_prefix=prefix))
        else:
            raise SchemaError(f"unsupported dataset format {kind!r}")

    if tasks is not None:
        task_list = tuple(TaskLabel(t) for t in tasks)
        # keep the explicit casing on every question so display matches the list
        canon = {t: t for t in task_list}
        questions = [
            Question(q.id, q.stem, q.options, q.gold_answer, canon.get(q.gold_task, q.gold_task), q.split)
            for q in questions
        ]
        stray = sorted({q.gold_task.name for q in questions if q.gold_task not in canon})
        if stray:
            raise IntegrityError(f"tasks {stray} are not in the supplied task list")
        present = {q.gold_task for q in questions}
        task_list = tuple(t for t in task_list if t in present)
    else:
        task_list = tuple(dict.fromkeys(q.gold_task for q in questions))
        canon = {t: t for t in task_list}
        questions = [
            q if q.gold_task.name == canon[q.gold_task].name
            else Question(q.id, q.stem, q.options, q.gold_answer, canon[q.gold_task], q.split)
            for q in questions
        ]
    return Dataset(ds_name, task_list, tuple(questions))


def dump_jsonl(d: Dataset, path: str | Path) -> None:
    """Write ``d`` in the line-delimited format ``load_dataset`` reads back."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in d.questions:
            fh.write(json.dumps(q.to_record(), ensure_ascii=False) + "\n")
