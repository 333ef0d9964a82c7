import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coe_ops.dataset import Question, TaskLabel
from coe_ops.prompting import (
    CLASSIFIER_PLAIN,
    CLASSIFIER_RAG,
    EXPERT_COT,
    parse_classifier,
    parse_context,
    parse_expert,
    question_block,
    render_classifier_prompt,
    render_expert_prompt,
    set_template_dir,
)
from coe_ops.retrieval import Hit, KBRecord, RetrievalResult

from helpers import ENGLISH_TASKS, GOLDEN, make_question

TASKS = [TaskLabel(t) for t in ENGLISH_TASKS]
GOLDEN_Q = Question(
    id="golden-1",
    stem="Which component parses raw log lines into templates?",
    options={"A": "Drain", "B": "Prophet", "C": "LSTM", "D": "Isolation Forest"},
    gold_answer="A",
    gold_task=TaskLabel("LogParser"),
)
GOLDEN_CONTEXT = RetrievalResult(
    (
        Hit(KBRecord("k1", "How do you extract templates from logs?\nA.Spell\nB.ARIMA\nC.GRU\nD.PCA", TaskLabel("LogParser")), 0.9, 0.6),
        Hit(
            KBRecord("k2", "What detects spikes in CPU metrics?\nA.Drain\nB.3-sigma\nC.Spell\nD.LogCluster", TaskLabel("TimeSeriesAnomalyDetection")),
            0.5,
            0.4,
        ),
    )
)


def golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


def test_plain_classifier_golden():
    p = render_classifier_prompt(GOLDEN_Q, TASKS)
    assert p.template_id == CLASSIFIER_PLAIN
    assert p.text == golden("classifier_plain.txt")
    assert p.text.startswith("You are a classifier that can categorize questions into specific tasks.")


def test_rag_classifier_golden():
    p = render_classifier_prompt(GOLDEN_Q, TASKS, GOLDEN_CONTEXT)
    assert p.template_id == CLASSIFIER_RAG
    assert p.text == golden("classifier_rag.txt")
    assert "You can refer to the following examples of questions and their corresponding tasks" in p.text


def test_expert_golden():
    p = render_expert_prompt(GOLDEN_Q)
    assert p.template_id == EXPERT_COT
    assert p.text == golden("expert_cot.txt")
    assert p.text.endswith(
        'finish your answer with "the answer is (X)" where X is the correct letter choice.'
    )


def test_question_block_is_embedded_verbatim():
    q = make_question("x", stem="multi\nline stem")
    assert question_block(q) in render_classifier_prompt(q, TASKS).text


def test_braces_survive_without_reexpansion():
    q = make_question("b", stem="What does {task_list} or {question} mean in ${HOME}?")
    assert "What does {task_list} or {question} mean in ${HOME}?" in render_expert_prompt(q).text
    assert "{task_list} or {question}" in render_classifier_prompt(q, TASKS).text


def test_context_lines_round_trip():
    text = render_classifier_prompt(GOLDEN_Q, TASKS, GOLDEN_CONTEXT).text
    assert parse_context(text) == [
        ("How do you extract templates from logs? A.Spell B.ARIMA C.GRU D.PCA", "LogParser"),
        ("What detects spikes in CPU metrics? A.Drain B.3-sigma C.Spell D.LogCluster", "TimeSeriesAnomalyDetection"),
    ]


def test_preconditions():
    with pytest.raises(ValueError):
        render_classifier_prompt(GOLDEN_Q, [])
    with pytest.raises(ValueError):
        render_classifier_prompt(GOLDEN_Q, TASKS, RetrievalResult(()))


def test_template_override(tmp_path):
    (tmp_path / "expert_cot.txt").write_text("Q: {question} / {option_A}\n")
    try:
        set_template_dir(tmp_path)
        assert render_expert_prompt(GOLDEN_Q).text == "Q: Which component parses raw log lines into templates? / Drain"
        # missing files fall back to the shipped ones
        assert render_classifier_prompt(GOLDEN_Q, TASKS).text == golden("classifier_plain.txt")
    finally:
        set_template_dir(None)


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("...reasoning... **Task: [LogParser]**", "LogParser"),
        ("**Task: [LogParser] **", "LogParser"),
        ("**Task: logparser**", "LogParser"),
        ("  ** Task :  [ RootCauseAnalysis ]  ** ", "RootCauseAnalysis"),
        ("I cannot tell.", None),
        ("**Task: [unknown] **", None),
        ("**Task: [Log Parser] **", None),
        ("**Task: []**", None),
        ("", None),
    ],
)
def test_parse_classifier(raw, expected):
    out = parse_classifier(raw, TASKS)
    assert (out.predicted.name if out.predicted else None) == expected
    assert out.raw == raw


def hand_scan_last_task(raw: str) -> str | None:
    """Independent oracle: walk the string for '**Task:' markers, keep the last bracket content."""
    last = None
    i = 0
    while True:
        j = raw.find("**Task: [", i)
        if j < 0:
            return last
        k = raw.find("]", j)
        if k < 0:
            return last
        last = raw[j + len("**Task: ["):k]
        i = k


def test_parse_classifier_last_occurrence():
    raw = "**Task: [Code]** no wait **Task: [Test]**"
    tasks = [TaskLabel("Code"), TaskLabel("Test")]
    assert hand_scan_last_task(raw) == "Test"
    assert parse_classifier(raw, tasks).predicted == TaskLabel("Test")


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("...so the answer is (B).", "B"),
        ("", None),
        ("The answer is (c)", "C"),
        ("the answer is D.", "D"),
        ("The Answer Is: (A)!", "A"),
        ("the answer is a memory leak, i.e. B", "B"),
        ("no letters here", None),
        ("Option C looks right", "C"),
    ],
)
def test_parse_expert(raw, expected):
    assert parse_expert(raw).choice == expected


def test_parse_expert_last_occurrence():
    raw = "the answer is (A)… reconsidering, the answer is (D)"
    assert re.findall(r"the answer is \(([A-D])\)", raw)[-1] == "D"
    assert parse_expert(raw).choice == "D"


@pytest.mark.parametrize("task", ENGLISH_TASKS + ["Build", "Code", "Plan"])
def test_classifier_round_trip(task):
    tasks = TASKS + [TaskLabel("Build"), TaskLabel("Code"), TaskLabel("Plan")]
    assert parse_classifier("**Task: [" + task + "] **", tasks).predicted == TaskLabel(task)


@pytest.mark.parametrize("letter", "ABCD")
def test_expert_round_trip(letter):
    assert parse_expert("the answer is (" + letter + ")").choice == letter


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=200))
def test_parsers_are_total(raw):
    out = parse_classifier(raw, TASKS)
    assert out.predicted is None or out.predicted in TASKS
    ans = parse_expert(raw)
    assert ans.choice in (None, "A", "B", "C", "D")


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=50), st.text(min_size=1, max_size=50))
def test_rendering_injective_on_stem(a, b):
    qa = make_question("x", stem=a)
    qb = make_question("x", stem=b)
    same = render_classifier_prompt(qa, TASKS).text == render_classifier_prompt(qb, TASKS).text
    assert same == (a == b)
    assert (render_expert_prompt(qa).text == render_expert_prompt(qb).text) == (a == b)
