import csv
import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coe_ops.dataset import Dataset, TaskLabel
from coe_ops.errors import ConfigurationError, IntegrityError
from coe_ops.evaluation import (
    BaselineSpec,
    export_report,
    heatmap_data,
    prf,
    radar_data,
    run_baseline,
    score_classification,
    score_qa,
)

from helpers import CHINESE_TASKS, ENGLISH_TASKS, GOLDEN, make_question, simple_map, synthetic_dataset

# ten questions, gold letters and predictions hand-picked so every class is non-trivial
HAND_GOLD = list("AABBBCCDDA")
HAND_PRED = list("ABBBCCADDA")


def hand_dataset(golds, task="Code"):
    qs = tuple(make_question(f"q{i}", task, g) for i, g in enumerate(golds))
    return Dataset("hand", (TaskLabel(task),), qs)


def oracle_prf(gold, pred, labels, average="weighted"):
    """Exact rational per-class metrics combined by support (or uniformly)."""
    ps, rs, fs, ws = [], [], [], []
    for c in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        n_pred = sum(1 for p in pred if p == c)
        n_gold = sum(1 for g in gold if g == c)
        prec = Fraction(tp, n_pred) if n_pred else Fraction(0)
        rec = Fraction(tp, n_gold) if n_gold else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        ps.append(prec), rs.append(rec), fs.append(f1), ws.append(n_gold)
    if average == "macro":
        present = [1 if w else 0 for w in ws]
        ws = present
    total = sum(ws)
    return tuple(sum(Fraction(w) * v for w, v in zip(ws, vals)) / total for vals in (ps, rs, fs))


def test_all_correct():
    d = synthetic_dataset({"Code": 8}, seed=4)
    r = score_qa([(q.id, q.gold_answer) for q in d.questions], d)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_hand_built_ten_items():
    d = hand_dataset(HAND_GOLD)
    r = score_qa([(f"q{i}", p) for i, p in enumerate(HAND_PRED)], d)
    p, rc, f = oracle_prf(HAND_GOLD, HAND_PRED, "ABCD")
    # by hand: A P=2/3 R=2/3, B P=2/3 R=2/3, C P=1/2 R=1/2, D P=1 R=1; supports 3,3,2,2
    assert p == Fraction(2 * 3 + 2 * 3 + Fraction(1, 2) * 3 * 2 + 3 * 2, 3 * 10)
    assert r.accuracy == 0.7 and r.correct == 7
    assert abs(r.precision - float(p)) < 1e-12
    assert abs(r.recall - float(rc)) < 1e-12
    assert abs(r.f1 - float(f)) < 1e-12
    assert r.confusion == [[2, 1, 0, 0, 0], [0, 2, 1, 0, 0], [1, 0, 1, 0, 0], [0, 0, 0, 2, 0]]


def test_unparsed_counts_as_wrong():
    d = hand_dataset("AB")
    r = score_qa([("q0", "A"), ("q1", None)], d)
    assert r.accuracy == 0.5
    assert r.confusion[1][4] == 1
    assert sum(map(sum, r.confusion)) == 2


def test_sklearn_cross_check():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = random.Random(9)
    gold = [rng.choice("ABCD") for _ in range(300)]
    pred = [rng.choice("ABCD") if rng.random() > 0.1 else None for _ in range(300)]
    d = hand_dataset(gold)
    for avg in ("weighted", "macro"):
        r = score_qa([(f"q{i}", p) for i, p in enumerate(pred)], d, average=avg)
        y_pred = [p or "X" for p in pred]
        p, rc, f, _ = metrics.precision_recall_fscore_support(gold, y_pred, labels=list("ABCD"), average=avg, zero_division=0)
        assert abs(r.precision - p) < 1e-12
        assert abs(r.recall - rc) < 1e-12
        assert abs(r.f1 - f) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCD"), st.sampled_from(["A", "B", "C", "D", None])), min_size=1, max_size=60))
def test_weighted_recall_equals_accuracy(pairs):
    d = hand_dataset([g for g, _ in pairs])
    r = score_qa([(f"q{i}", p) for i, (_, p) in enumerate(pairs)], d)
    assert abs(r.recall - r.accuracy) < 1e-12
    assert sum(map(sum, r.confusion)) == len(pairs)


def test_score_rejects_unknown_and_duplicate_ids():
    d = hand_dataset("AB")
    with pytest.raises(IntegrityError):
        score_qa([("zzz", "A")], d)
    with pytest.raises(IntegrityError):
        score_qa([("q0", "A"), ("q0", "B")], d)


def test_prf_zero_division_and_bad_average():
    assert prf(np.zeros((4, 5), dtype=int)) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        prf(np.zeros((2, 3), dtype=int), average="micro")


def test_classification_all_gold_and_all_unknown():
    d = synthetic_dataset({t: 3 for t in ENGLISH_TASKS})
    perfect = score_classification([(q.id, q.gold_task) for q in d.questions], d)
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)
    unknown = score_classification([(q.id, None) for q in d.questions], d)
    assert (unknown.accuracy, unknown.precision, unknown.recall, unknown.f1) == (0.0, 0.0, 0.0, 0.0)
    assert [row[-1] for row in unknown.confusion] == [3] * 5
    assert unknown.columns[-1] == "UNKNOWN"


def test_classification_eight_tasks_hand_metrics():
    counts = dict(zip(CHINESE_TASKS, [2, 3, 1, 2, 4, 1, 1, 2]))
    d = synthetic_dataset(counts)
    rng = random.Random(3)
    preds = []
    for q in d.questions:
        r = rng.random()
        preds.append((q.id, q.gold_task if r < 0.6 else (None if r < 0.75 else TaskLabel(rng.choice(CHINESE_TASKS)))))
    report = score_classification(preds, d)
    gold = [q.gold_task.name for q in d.questions]
    pred = [p.name if p else "UNKNOWN" for _, p in preds]
    p, rc, f = oracle_prf(gold, pred, CHINESE_TASKS)
    assert abs(report.precision - float(p)) < 1e-12
    assert abs(report.recall - float(rc)) < 1e-12
    assert abs(report.f1 - float(f)) < 1e-12
    assert report.accuracy == sum(g == x for g, x in zip(gold, pred)) / len(gold)


def expert_answers(d, accuracies, seed=0):
    rng = random.Random(seed)
    wrong = {"A": "B", "B": "C", "C": "D", "D": "A"}
    return {
        name: {q.id: q.gold_answer if rng.random() < acc else wrong[q.gold_answer] for q in d.questions}
        for name, acc in accuracies.items()
    }


def test_random_coe_single_pool_equals_single_expert():
    d = synthetic_dataset({"Code": 40, "Test": 20}, seed=2)
    answers = expert_answers(d, {"E1": 0.6, "E2": 0.3})
    rnd = run_baseline(BaselineSpec("random-coe", seed=5), answers, d, pool=["E1"])
    single = run_baseline(BaselineSpec("single-expert", expert="E1"), answers, d)
    assert rnd.confusion == single.confusion and rnd.accuracy == single.accuracy


def test_random_coe_seed_reproducible():
    d = synthetic_dataset({"Code": 50, "Test": 50}, seed=2)
    answers = expert_answers(d, {"E1": 0.6, "E2": 0.3, "E3": 0.8})
    a = run_baseline(BaselineSpec.parse("random-coe:11"), answers, d)
    b = run_baseline(BaselineSpec.parse("random-coe:11"), answers, d)
    assert a.to_json() == b.to_json()
    # independent replay of the draw sequence
    rng = random.Random(11)
    names = ["E1", "E2", "E3"]
    replay = sum(answers[names[rng.randrange(3)]][q.id] == q.gold_answer for q in d.questions)
    assert a.correct == replay


def test_oracle_router_closed_form():
    d = synthetic_dataset({"Code": 30, "Test": 20}, seed=6)
    answers = expert_answers(d, {"E1": 0.7, "E2": 0.4})
    tm = simple_map({"Code": "E1", "Test": "E2"}, "E1")
    r = run_baseline(BaselineSpec("oracle-router"), answers, d, tm)
    hits = {t: sum(answers[e][q.id] == q.gold_answer for q in d.questions_for(t)) for t, e in (("Code", "E1"), ("Test", "E2"))}
    assert r.correct == hits["Code"] + hits["Test"]
    assert r.accuracy == (30 * (hits["Code"] / 30) + 20 * (hits["Test"] / 20)) / 50
    with pytest.raises(ConfigurationError):
        run_baseline(BaselineSpec("oracle-router"), answers, d)


def test_baseline_spec_validation():
    with pytest.raises(ConfigurationError):
        BaselineSpec("random-coe")
    with pytest.raises(ConfigurationError):
        BaselineSpec("oracle-router", seed=3)
    with pytest.raises(ConfigurationError):
        BaselineSpec.parse("random-coe:abc")
    with pytest.raises(ConfigurationError):
        BaselineSpec.parse("single-expert")
    with pytest.raises(ConfigurationError):
        BaselineSpec.parse("best-guess")
    assert BaselineSpec.parse("single-expert:Internlm-7B").expert == "Internlm-7B"


def five_task_reports():
    d = synthetic_dataset({t: 4 for t in ENGLISH_TASKS}, seed=8)
    answers = expert_answers(d, {"E1": 0.5, "E2": 0.75}, seed=1)
    return [run_baseline(BaselineSpec("single-expert", expert=e), answers, d) for e in ("E1", "E2")]


def test_radar_has_one_row_per_task(tmp_path):
    reports = five_task_reports()
    data = radar_data(reports)
    assert data["axes"] == ENGLISH_TASKS
    path = export_report(reports, "radar-data", tmp_path / "radar.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["task", "E1", "E2"]
    assert len(rows) == 6
    json_path = export_report(reports, "radar-data", tmp_path / "radar.json")
    assert json.loads(json_path.read_text()) == data


def test_heatmap_rows_sum_to_support(tmp_path):
    d = hand_dataset(HAND_GOLD)
    r = score_qa([(f"q{i}", p) for i, p in enumerate(HAND_PRED)], d)
    data = heatmap_data(r)
    assert data["row_totals"] == [3, 3, 2, 2]
    for row in data["rates"]:
        assert abs(sum(row) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        export_report([r, r], "confusion-heatmap-data", tmp_path / "h.json")


def test_exports_match_golden(tmp_path):
    d = hand_dataset(HAND_GOLD)
    r = score_qa([(f"q{i}", p) for i, p in enumerate(HAND_PRED)], d, subject="hand")
    heat = export_report(r, "confusion-heatmap-data", tmp_path / "heatmap.json")
    assert heat.read_text() == (GOLDEN / "heatmap_hand.json").read_text()
    table = export_report(r, "metrics-table", tmp_path / "metrics.csv")
    assert table.read_text() == (GOLDEN / "metrics_hand.csv").read_text()
    with pytest.raises(ValueError):
        export_report(r, "pie-chart", tmp_path / "x")
