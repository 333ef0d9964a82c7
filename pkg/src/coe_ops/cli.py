"""Command-line entry point: ``coe-ops <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data integrity error
(including corrupt checkpoints), 4 transport failure after retries.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import __version__
from .config import SetConfig, provider_for
from .dataset import Dataset, load_dataset
from .errors import CoeOpsError, ConfigurationError, IntegrityError
from .evaluation import BaselineSpec, EvalReport, export_report, run_baseline, score_classification, score_qa
from .leaderboard import TaskExpertMap, build_matrix, build_task_expert_map, check_pool_bounds
from .llm_client import RunCheckpoint, WorkItem, run_with_checkpoint
from .prompting import parse_expert, render_expert_prompt
from .retrieval import KnowledgeBase, build_kb, make_embedding_provider
from .router import Pipeline, classify_all, read_decisions, run_pipeline, write_decisions

log = logging.getLogger("coe_ops")


def _load_data(args) -> Dataset:
    d = load_dataset(args.dataset, tasks=getattr(args, "task_list", None), task=getattr(args, "task", None))
    split = getattr(args, "split", None)
    if split and split != "all":
        d = d.filter(split=split)
    return d


def _mode(args) -> str:
    if getattr(args, "mock", False):
        return "mock"
    if getattr(args, "live", False):
        return "live"
    return "auto"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def cmd_build_leaderboard(args) -> int:
    cfg = SetConfig.load(args.config)
    d = _load_data(args)
    if len(d) == 0:
        raise ConfigurationError("dataset is empty after split filtering")
    if not cfg.experts:
        raise ConfigurationError("config lists no experts")
    if not args.allow_degenerate_pool:
        # fail before spending any expert calls
        check_pool_bounds(len(cfg.experts), len(d.tasks))
    out = Path(args.out)
    (out / "answers").mkdir(parents=True, exist_ok=True)
    ckpt_path = cfg.checkpoint or out / "leaderboard.ckpt.jsonl"
    parallelism = args.parallelism or cfg.parallelism

    logs = {}
    for ep in cfg.experts:
        provider = provider_for(ep, _mode(args), d)
        ckpt = RunCheckpoint(ckpt_path, run_id=f"leaderboard:{ep.name}")
        items = [WorkItem(q.id, "answer", render_expert_prompt(q)) for q in d.questions]
        before = len(ckpt)
        records = run_with_checkpoint(
            items, ep, provider, ckpt, parse=lambda raw: parse_expert(raw).choice, parallelism=parallelism
        )
        log.info("%s: %d answers (%d new)", ep.name, len(records), len(ckpt) - before)
        logs[ep.name] = [(r.question_id, r.parsed) for r in records]
        with (out / "answers" / f"{_safe(ep.name)}.jsonl").open("w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps({"question_id": r.question_id, "choice": r.parsed, "raw": r.raw}, ensure_ascii=False) + "\n")

    split = args.split or "all"
    matrix = build_matrix(logs, d, cfg.expert_refs, provenance={"set": cfg.name, "split": split})
    matrix_path = Path(args.matrix) if args.matrix else (cfg.matrix or out / "matrix.json")
    map_path = Path(args.map) if args.map else (cfg.map or out / "map.json")
    for path in (matrix_path, map_path):
        path.parent.mkdir(parents=True, exist_ok=True)
    matrix.save(matrix_path)
    task_map = build_task_expert_map(matrix, enforce_pool_bounds=not args.allow_degenerate_pool)
    task_map.save(map_path)
    print(f"capability matrix -> {matrix_path}")
    print(f"task-expert map   -> {map_path}")
    for t, e in task_map.entries.items():
        print(f"  {t.name:<32} {e.name}")
    print(f"  {'<unknown>':<32} {task_map.unknown_expert.name}")
    return 0


def cmd_build_kb(args) -> int:
    cfg = SetConfig.load(args.config) if args.config else None
    d = load_dataset(args.dataset)
    embedding = (cfg.embedding if cfg else None) or {"kind": args.provider, "dim": args.dim}
    provider = make_embedding_provider(embedding)
    split = None if args.split == "all" else args.split
    out = Path(args.out) if args.out else (cfg.kb if cfg and cfg.kb else None)
    if out is None:
        raise ConfigurationError("no output path: pass --out or set kb in the config")
    partial = Path(str(out) + ".partial.jsonl")
    try:
        kb = build_kb(
            d, provider, split=split, normalize=args.normalize or bool(cfg and cfg.normalize),
            partial_path=partial, parallelism=(cfg.parallelism if cfg else 1),
        )
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    kb.save(out)
    partial.unlink(missing_ok=True)
    print(f"knowledge base: {len(kb)} records, dim {kb.dim}, provider {kb.provider_id} -> {out}")
    return 0


def _pipeline(args, cfg: SetConfig, d: Dataset, oracle: bool = False) -> Pipeline:
    if cfg.classifier is None and not oracle:
        raise ConfigurationError("config has no classifier endpoint")
    map_path = Path(args.map) if getattr(args, "map", None) else cfg.map
    if map_path is None:
        raise ConfigurationError("no task-expert map: pass --map or set map in the config")
    task_map = TaskExpertMap.load(map_path)
    mode = _mode(args)
    experts = {e.name: (e, provider_for(e, mode, d)) for e in cfg.experts}
    kb = embedder = None
    if cfg.kb is not None and not args.no_rag:
        kb = KnowledgeBase.load(cfg.kb)
        embedder = make_embedding_provider(cfg.embedding)
        if embedder.provider_id != kb.provider_id:
            raise ConfigurationError(f"knowledge base built with {kb.provider_id}, config embeds with {embedder.provider_id}")
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint
    run_id = args.run_id or cfg.run_id or cfg.name
    clf = cfg.classifier
    clf_provider = provider_for(clf, mode, d) if clf is not None else None
    tasks = tuple(t for t in task_map.tasks)
    return Pipeline(
        task_map=task_map,
        classifier=clf,
        classifier_provider=clf_provider,
        experts=experts,
        checkpoint=RunCheckpoint(ckpt_path, run_id=run_id + (":oracle" if oracle else "")),
        tasks=tasks,
        kb=kb,
        embedder=embedder,
        k=args.k or cfg.k,
        normalize=cfg.normalize,
        exclude_self=args.exclude_self or cfg.exclude_self,
        oracle_classifier=oracle,
    )


def _write_reports(reports: list[EvalReport], out: Path, prefix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    export_report(reports, "metrics-table", out / f"{prefix}metrics.csv")
    export_report(reports, "radar-data", out / f"{prefix}radar.csv")
    export_report(reports, "radar-data", out / f"{prefix}radar.json")
    for r in reports:
        export_report(r, "confusion-heatmap-data", out / f"{prefix}confusion_{_safe(r.subject)}.json")
    print(f"{'subject':<36} {'n':>6} {'acc':>8} {'prec':>8} {'rec':>8} {'f1':>8}")
    for r in reports:
        print(f"{r.subject:<36} {r.n:>6} {r.accuracy:>8.4f} {r.precision:>8.4f} {r.recall:>8.4f} {r.f1:>8.4f}")


def cmd_classify(args) -> int:
    cfg = SetConfig.load(args.config)
    d = _load_data(args)
    p = _pipeline(args, cfg, d)
    rows = classify_all(d.questions, p, parallelism=args.parallelism or cfg.parallelism)
    out = Path(args.out)
    with out.open("w", encoding="utf-8") as fh:
        for qid, pred, raw, hits in rows:
            rec = {"question_id": qid, "predicted_task": pred.name if pred else None, "raw": raw,
                   "retrieval_hits": [list(h) for h in hits] if hits is not None else None}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"{len(rows)} predictions -> {out}")
    if args.report:
        subject = f"{cfg.classifier.name}{'' if p.kb is not None else ' w/o RAG'}"
        report = score_classification([(qid, pred) for qid, pred, _, _ in rows], d, subject)
        _write_reports([report], Path(args.report), prefix="classification_")
    return 0


def cmd_route(args) -> int:
    if args.oracle_classifier and args.report:
        raise ConfigurationError("--oracle-classifier is a test mode; its results cannot be published with --report")
    cfg = SetConfig.load(args.config)
    d = _load_data(args)
    p = _pipeline(args, cfg, d, oracle=args.oracle_classifier)
    decisions = run_pipeline(d.questions, p, parallelism=args.parallelism or cfg.parallelism)
    write_decisions(decisions, args.out)
    failed = sum(1 for x in decisions if x.failed)
    print(f"{len(decisions)} decisions ({failed} failed) -> {args.out}")
    if args.report:
        report = score_qa(decisions, d, subject=f"CoE-Ops({cfg.classifier.name})")
        _write_reports([report], Path(args.report))
    return 4 if failed and args.strict else 0


def _read_answer_log(path: Path) -> dict[str, str | None]:
    out = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    out[rec["question_id"]] = rec.get("choice")
                except (json.JSONDecodeError, KeyError) as exc:
                    raise IntegrityError(f"{path}: bad answer record on line {lineno} ({exc})") from None
    return out


def cmd_evaluate(args) -> int:
    d = _load_data(args)
    answers: dict[str, dict] = {}
    for spec in args.answers or []:
        if "=" in spec:
            name, path = spec.split("=", 1)
            answers[name] = _read_answer_log(Path(path))
        else:
            for f in sorted(Path(spec).glob("*.jsonl")):
                answers[f.stem] = _read_answer_log(f)
    if args.config:
        cfg = SetConfig.load(args.config)
        # answer files are written under sanitised names; map them back
        by_safe = {_safe(e.name): e.name for e in cfg.experts}
        answers = {by_safe.get(k, k): v for k, v in answers.items()}

    reports: list[EvalReport] = []
    for name, table in answers.items():
        log_pairs = [(qid, c) for qid, c in table.items() if qid in d]
        reports.append(score_qa(log_pairs, d, subject=name, average=args.average))

    for path in args.decisions or []:
        decisions = [x for x in read_decisions(path) if x.question_id in d]
        if any(x.oracle for x in decisions) and not args.allow_oracle:
            raise ConfigurationError(f"{path} comes from an oracle-classifier run; pass --allow-oracle to score it")
        reports.append(score_qa(decisions, d, subject=Path(path).stem, average=args.average))

    task_map = TaskExpertMap.load(args.map) if args.map else None
    for text in args.baseline or []:
        spec = BaselineSpec.parse(text)
        reports.append(run_baseline(spec, answers, d, task_map, average=args.average))

    class_reports = []
    for path in args.predictions or []:
        preds = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    if rec["question_id"] in d:
                        t = rec.get("predicted_task")
                        preds.append((rec["question_id"], d.task(t) if t and _has_task(d, t) else None))
        class_reports.append(score_classification(preds, d, subject=Path(path).stem, average=args.average))

    if not reports and not class_reports:
        raise ConfigurationError("nothing to evaluate: pass --answers, --decisions, --baseline or --predictions")
    out = Path(args.out)
    if reports:
        _write_reports(reports, out)
    if class_reports:
        _write_reports(class_reports, out, prefix="classification_")
    return 0


def _has_task(d: Dataset, name: str) -> bool:
    try:
        d.task(name)
        return True
    except IntegrityError:
        return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coe-ops", description="Two-stage expert routing for AIOps multiple-choice QA.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, split_default):
        p.add_argument("--dataset", required=True, help="benchmark file or directory (CSV per task, or JSONL)")
        p.add_argument("--split", default=split_default, choices=["eval", "test", "all"], help=f"default: {split_default}")
        p.add_argument("--task", help="task label override for a single delimited file")
        p.add_argument("--task-list", nargs="+", help="explicit task order")

    def provider_args(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--mock", action="store_true", help="use the mock defined for every endpoint")
        g.add_argument("--live", action="store_true", help="ignore mock definitions and call the endpoints")
        p.add_argument("--parallelism", type=int, help="concurrent requests (default from config)")

    p = sub.add_parser("build-leaderboard", help="evaluate every expert and derive the task-expert map")
    p.add_argument("--config", required=True)
    data_args(p, "all")
    provider_args(p)
    p.add_argument("--out", default=".", help="directory for answers/, matrix.json and map.json")
    p.add_argument("--matrix", help="capability matrix output path")
    p.add_argument("--map", help="task-expert map output path")
    p.add_argument("--allow-degenerate-pool", action="store_true",
                   help="skip the 2 <= experts <= tasks check on the candidate pool")
    p.set_defaults(func=cmd_build_leaderboard)

    p = sub.add_parser("build-kb", help="embed labelled questions into a knowledge base file")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval", choices=["eval", "test", "all"])
    p.add_argument("--out", help="knowledge base path (default: kb from config)")
    p.add_argument("--provider", default="hash", choices=["hash", "bow"], help="mock provider when no config is given")
    p.add_argument("--dim", type=int, default=384)
    p.add_argument("--normalize", action="store_true", help="L2-normalise vectors at encode time")
    p.set_defaults(func=cmd_build_kb)

    for name, func, help_text in (
        ("classify", cmd_classify, "run the task classifier only"),
        ("route", cmd_route, "classify, route and answer every question"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        data_args(p, "test")
        provider_args(p)
        p.add_argument("--out", required=True, help="output JSONL path")
        p.add_argument("--map", help="task-expert map (default: map from config)")
        p.add_argument("--checkpoint", help="checkpoint path (default: checkpoint from config)")
        p.add_argument("--run-id")
        p.add_argument("--k", type=int, help="retrieved examples per question")
        p.add_argument("--no-rag", action="store_true", help="use the plain classifier prompt")
        p.add_argument("--exclude-self", action="store_true", help="drop the query's own knowledge-base record")
        p.add_argument("--report", help="also write metric/heatmap/radar files to this directory")
        if name == "route":
            p.add_argument("--oracle-classifier", action="store_true",
                           help="TEST ONLY: route by gold task labels instead of calling the classifier")
            p.add_argument("--strict", action="store_true", help="exit 4 if any question failed")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score answer logs, decision logs, baselines and predictions")
    data_args(p, "all")
    p.add_argument("--config", help="set config (maps answer file names back to expert names)")
    p.add_argument("--answers", nargs="+", help="answers directory or NAME=PATH entries")
    p.add_argument("--decisions", nargs="+")
    p.add_argument("--predictions", nargs="+", help="classifier prediction files")
    p.add_argument("--baseline", nargs="+", help="random-coe:SEED, oracle-router, single-expert:NAME")
    p.add_argument("--map", help="task-expert map (needed by oracle-router)")
    p.add_argument("--average", default="weighted", choices=["weighted", "macro"])
    p.add_argument("--allow-oracle", action="store_true", help="score oracle-classifier decision logs")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CoeOpsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
