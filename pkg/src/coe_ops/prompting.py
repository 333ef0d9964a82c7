"""Prompt rendering and structured-output parsing.

Templates live in ``templates/*.txt`` and use ``{name}`` placeholders. Values
are substituted in one pass, so braces inside question text are kept as-is.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

from .dataset import OPTION_LETTERS, Question, TaskLabel

if TYPE_CHECKING:
    from .retrieval import RetrievalResult

CLASSIFIER_PLAIN = "classifier-plain"
CLASSIFIER_RAG = "classifier-rag"
EXPERT_COT = "expert-cot"
TEMPLATE_FILES = {
    CLASSIFIER_PLAIN: "classifier_plain.txt",
    CLASSIFIER_RAG: "classifier_rag.txt",
    EXPERT_COT: "expert_cot.txt",
}

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
CONTEXT_LINE = re.compile(r"^\s*(\d+)\. Question: (.*) → Task: (.*?)\s*$")

_template_dir: Path | None = None


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    template_id: str
    question_id: str | None = None


@dataclass(frozen=True)
class ClassifierOutput:
    raw: str
    predicted: TaskLabel | None  # None is the "unknown" class

    @property
    def is_unknown(self) -> bool:
        return self.predicted is None


@dataclass(frozen=True)
class ExpertAnswer:
    raw: str
    choice: str | None  # None when no option letter could be recovered

    @property
    def parsed(self) -> bool:
        return self.choice is not None


def set_template_dir(path: str | Path | None) -> None:
    """Point rendering at a directory of replacement template files."""
    global _template_dir
    _template_dir = Path(path) if path is not None else None
    load_template.cache_clear()


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    try:
        filename = TEMPLATE_FILES[template_id]
    except KeyError:
        raise ValueError(f"unknown template {template_id!r}") from None
    if _template_dir is not None and (_template_dir / filename).exists():
        text = (_template_dir / filename).read_text(encoding="utf-8")
    else:
        text = resources.files("coe_ops").joinpath("templates", filename).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def substitute(template: str, values: Mapping[str, str]) -> str:
    def repl(m: re.Match) -> str:
        try:
            return values[m.group(1)]
        except KeyError:
            raise ValueError(f"no value for placeholder {{{m.group(1)}}}") from None

    return _PLACEHOLDER.sub(repl, template)


def _question_values(q: Question) -> dict[str, str]:
    return {"question": q.stem, **{f"option_{k}": q.options[k] for k in OPTION_LETTERS}}


def question_block(q: Question) -> str:
    """The stem and options exactly as they appear inside the classifier prompts."""
    return q.stem + "".join(f"\n{k}.{q.options[k]}" for k in OPTION_LETTERS)


def render_task_list(tasks: Sequence[TaskLabel]) -> str:
    return ", ".join(t.name for t in tasks)


def render_context(result: "RetrievalResult") -> str:
    lines = []
    for i, hit in enumerate(result.hits, start=1):
        text = " ".join(hit.record.text.split())
        lines.append(f"{i}. Question: {text} → Task: {hit.record.task.name}")
    return "\n" + "\n".join(lines)


def parse_context(prompt_text: str) -> list[tuple[str, str]]:
    """Recover (question, task) pairs from a rendered context block."""
    out = []
    for line in prompt_text.splitlines():
        m = CONTEXT_LINE.match(line)
        if m:
            out.append((m.group(2), m.group(3)))
    return out


def render_classifier_prompt(
    q: Question,
    tasks: Sequence[TaskLabel],
    context: "RetrievalResult | None" = None,
) -> RenderedPrompt:
    if not tasks:
        raise ValueError("task list must not be empty")
    values = {"task_list": render_task_list(tasks), **_question_values(q)}
    if context is None:
        return RenderedPrompt(substitute(load_template(CLASSIFIER_PLAIN), values), CLASSIFIER_PLAIN, q.id)
    if not context.hits:
        raise ValueError("retrieval context has no hits")
    values["context"] = render_context(context)
    return RenderedPrompt(substitute(load_template(CLASSIFIER_RAG), values), CLASSIFIER_RAG, q.id)


def render_expert_prompt(q: Question) -> RenderedPrompt:
    return RenderedPrompt(substitute(load_template(EXPERT_COT), _question_values(q)), EXPERT_COT, q.id)


# "**Task: [LogParser] **", tolerant of missing brackets and spacing
_TASK_PATTERN = re.compile(r"\*\*\s*Task\s*:\s*\[?\s*([^\[\]*\n]*?)\s*\]?\s*\*\*", re.IGNORECASE)
_ANSWER_PATTERN = re.compile(
    r"(?i:the\s+answer\s+is)\s*:?\s*(?:\(\s*([A-Da-d])\s*\)|\b([A-D])(?![A-Za-z0-9]))"
)
_LETTER_TOKEN = re.compile(r"(?<![A-Za-z0-9])([A-D])(?![A-Za-z0-9])")


def parse_classifier(raw: str, tasks: Sequence[TaskLabel]) -> ClassifierOutput:
    """Read the last ``**Task: [...] **`` marker; anything unmatched is unknown."""
    text = raw if isinstance(raw, str) else ""
    matches = list(_TASK_PATTERN.finditer(text))
    if not matches:
        return ClassifierOutput(text, None)
    captured = matches[-1].group(1).strip()
    if not captured:
        return ClassifierOutput(text, None)
    key = captured.casefold()
    for t in tasks:
        if t.key == key:
            return ClassifierOutput(text, t)
    return ClassifierOutput(text, None)


def parse_expert(raw: str) -> ExpertAnswer:
    """Extract the chosen option letter from a chain-of-thought answer."""
    text = raw if isinstance(raw, str) else ""
    matches = list(_ANSWER_PATTERN.finditer(text))
    if matches:
        m = matches[-1]
        return ExpertAnswer(text, (m.group(1) or m.group(2)).upper())
    tokens = _LETTER_TOKEN.findall(text)
    if tokens:
        return ExpertAnswer(text, tokens[-1])
    return ExpertAnswer(text, None)
