"""Command-line entry point: select, search, build-data, rerank, verify-traces."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import _kernels
from .config import RunConfig
from .core import ERROR_LABELS, Problem, canonical_json, stable_seed
from .datagen import (
    DatasetRecord,
    InjectionSpec,
    atomic_write,
    build_dialogue_critique,
    export_dataset,
    filter_trajectories,
    inject_error,
    injection_record,
    qc_filters,
    search_record,
)
from .errors import ConfigError, EmptyCorpus, PrmSearchError
from .inference import SuiteRow, evaluate_suite, rows_to_csv, rows_to_json
from .mcts import ScoredTrajectory, check_trace, search
from .selection import CellCount, build_reports, difficulty_filter, stratified_quotas

logger = logging.getLogger("prmsearch")

EXIT_OK, EXIT_ITEM_FAILURES, EXIT_FATAL = 0, 1, 2


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_text(path: Path, text: str):
    atomic_write(path, text.encode("utf-8"))


def load_corpus(cfg: RunConfig) -> dict[str, Problem]:
    path = cfg.path("corpus", must_exist=True)
    problems = {}
    for row in read_jsonl(path):
        p = Problem.from_dict(row)
        if p.id in problems:
            raise ConfigError(f"duplicate problem id {p.id!r} in corpus", path)
        problems[p.id] = p
    return problems


def read_ids(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


# --- select ---------------------------------------------------------------

def cmd_select(cfg: RunConfig, top_fraction: Optional[float] = None) -> int:
    problems = load_corpus(cfg)
    if not problems:
        raise EmptyCorpus("corpus holds no problems")
    sel = cfg.data["selection"]
    top_fraction = float(top_fraction if top_fraction is not None else sel["top_fraction"])
    stats = {r["problem_id"]: r for r in read_jsonl(cfg.path("rollout_scores", must_exist=True))}

    kept = set(difficulty_filter(
        (pid, float(stats.get(pid, {}).get("model_accuracy", 0.0)),
         bool(stats.get(pid, {}).get("text_only_solvable", False)))
        for pid in sorted(problems)))
    scores, skipped = {}, []
    for pid in sorted(kept):
        solutions = stats.get(pid, {}).get("step_scores") or []
        if len(solutions) < 2:
            skipped.append(pid)
        else:
            scores[pid] = solutions
    reports = build_reports(scores, top_fraction) if scores else []
    ranked = sorted((r for r in reports if r.prioritized), key=lambda r: (-r.variance, r.problem_id))

    counts_path = cfg.path("concept_counts", required=False)
    if counts_path is not None and counts_path.exists():
        counts = [CellCount.from_dict(r) for r in read_jsonl(counts_path)]
    else:
        cells: dict = {}
        for p in problems.values():
            cells.setdefault((p.subject, p.grade), set()).update(p.concept_ids or {p.id})
        counts = [CellCount(s, g, len(c)) for (s, g), c in sorted(cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))]
    quotas = stratified_quotas(counts, int(sel["total"]))
    used: dict = {}
    chosen = []
    for r in ranked:
        cell = (problems[r.problem_id].subject, problems[r.problem_id].grade)
        if used.get(cell, 0) < quotas.get(cell, 0):
            used[cell] = used.get(cell, 0) + 1
            chosen.append(r.problem_id)

    report = {
        "top_fraction": top_fraction,
        "filtered_out": sorted(set(problems) - kept),
        "insufficient_samples": skipped,
        "reports": [r.to_dict() for r in reports],
        "quotas": [{"subject": s.value, "grade": g, "quota": q} for (s, g), q in quotas.items()],
        "selected": chosen,
    }
    write_text(cfg.path("selection_report"), canonical_json(report) + "\n")
    write_text(cfg.path("ids"), "".join(i + "\n" for i in chosen))
    print(f"selected {len(chosen)} of {len(problems)} problems "
          f"({len(report['filtered_out'])} filtered, {len(skipped)} without enough samples)")
    return EXIT_OK


# --- search ---------------------------------------------------------------

def cmd_search(cfg: RunConfig, ids: Optional[Sequence[str]] = None) -> int:
    problems = load_corpus(cfg)
    if ids is None:
        ids = read_ids(cfg.path("ids", must_exist=True))
    missing = [i for i in ids if i not in problems]
    if missing:
        raise ConfigError(f"ids not found in corpus: {missing[:5]}")
    search_cfg = cfg.search_config()
    actors = cfg.actors()
    prm = cfg.reward_model()
    out_dir, trace_dir = cfg.path("trajectories"), cfg.path("traces")

    def run(pid):
        try:
            result = search(problems[pid], actors, prm, search_cfg)
        except Exception as exc:  # isolate per-problem failures
            logger.error("search failed for %s: %s", pid, exc)
            return pid, {"error": str(exc)}
        write_text(out_dir / f"{pid}.json", canonical_json(result.to_dict()) + "\n")
        write_text(trace_dir / f"{pid}.jsonl", result.trace_jsonl())
        st = result.tree_stats
        return pid, {"trajectories": len(result.trajectories), "nodes": st.node_count, "pruned": st.pruned,
                     "completed_rollouts": st.completed_rollouts}

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        summary = dict(pool.map(run, ids))
    failures = sum("error" in v for v in summary.values())
    write_text(out_dir / "summary.json", canonical_json({"problems": summary, "failures": failures}) + "\n")
    total = sum(v.get("trajectories", 0) for v in summary.values())
    print(f"searched {len(ids)} problems: {total} trajectories, {failures} failures")
    return EXIT_ITEM_FAILURES if failures else EXIT_OK


# --- build-data -----------------------------------------------------------

def cmd_build_data(cfg: RunConfig) -> int:
    seed = cfg.require_seed()
    dg = cfg.data["datagen"]
    problems = load_corpus(cfg)
    prm = cfg.reward_model()
    teacher = cfg.reward_model("teacher")
    second = cfg.optional_reward_model("second_annotator")
    actors = cfg.actors()
    injector = cfg.optional_actor("injector") or actors[0]
    segmenter = cfg.optional_actor("segmenter")
    records: list[DatasetRecord] = []
    failures = 0

    store = cfg.path("trajectories", required=False)
    if store is not None and store.is_dir():
        for f in sorted(store.glob("*.json")):
            if f.name == "summary.json":
                continue
            data = json.loads(f.read_text(encoding="utf-8"))
            problem = problems.get(data["problem_id"])
            if problem is None:
                logger.error("trajectory file %s names an unknown problem", f)
                failures += 1
                continue
            cands = []
            for entry in data["trajectories"]:
                traj = ScoredTrajectory.from_dict(entry).trajectory
                cands.append((traj, prm.critique_full(problem, traj)))
            kept = {id(t) for t in filter_trajectories(cands, dg["confidence_floor"])}
            records += [search_record(t, c) for t, c in cands if id(t) in kept]

    refs = cfg.path("reference_solutions", required=False)
    if refs is not None and refs.exists():
        for row in read_jsonl(refs):
            pid, steps = row["problem_id"], row["steps"]
            rng = random.Random(stable_seed(seed, "inject", pid))
            for _ in range(int(dg["injections_per_reference"])):
                spec = InjectionSpec(rng.randrange(len(steps)), rng.choice(ERROR_LABELS), injector.id)
                try:
                    corrupted, gold = inject_error(steps, spec, injector, problems.get(pid))
                except PrmSearchError as exc:
                    logger.error("injection failed for %s: %s", pid, exc)
                    failures += 1
                    continue
                records.append(injection_record(pid, corrupted, gold))

    answers = cfg.path("student_answers", required=False)
    if answers is not None and answers.exists():
        for row in read_jsonl(answers):
            problem = problems.get(row["problem_id"])
            try:
                if problem is None:
                    raise ConfigError(f"unknown problem {row['problem_id']!r} in student answers")
                records.append(build_dialogue_critique(problem, row["answer"], teacher, segmenter))
            except (PrmSearchError, ValueError) as exc:
                logger.error("dialogue critique failed for %s: %s", row.get("problem_id"), exc)
                failures += 1

    duplicates = None
    if second is not None:
        from .core import ActionKind, ReasoningStep, Trajectory
        duplicates = {}
        for rec in records:
            p = problems.get(rec.problem_id)
            if p is None:
                continue
            traj = Trajectory(p.id, tuple(ReasoningStep(ActionKind.THINKING, s) for s in rec.segments))
            duplicates[rec.key] = [c.label for c in second.critique_full(p, traj)]

    retained, rejections = qc_filters(records, duplicates, dg["max_error_share"], seed)
    root = cfg.path("datasets")
    manifest = export_dataset(retained, root)
    write_text(root / "qc_report.json", canonical_json(rejections) + "\n")
    for f in manifest["files"]:
        print(f"{f['path']}: {f['records']} records sha256={f['sha256'][:12]}")
    print(f"exported {manifest['total_records']} records ({len(rejections)} rejected by qc, {failures} failures)")
    return EXIT_ITEM_FAILURES if failures else EXIT_OK


# --- rerank ---------------------------------------------------------------

def cmd_rerank(cfg: RunConfig, n_values: Optional[Sequence[int]] = None, ids: Optional[Sequence[str]] = None) -> int:
    problems = load_corpus(cfg)
    chosen = [problems[i] for i in ids] if ids else [problems[k] for k in sorted(problems)]
    chosen = [p for p in chosen if p.ground_truth]
    if not chosen:
        raise ConfigError("no problems with gold answers to rerank")
    if n_values:
        cfg.data["bon"]["n_values"] = list(n_values)
    configs = cfg.bon_configs()
    actor = cfg.actors()[0]
    prm = cfg.reward_model()
    totals = {c.label: SuiteRow(c.strategy.value, c.n, 0, 0) for c in configs}
    audit: list[dict] = []
    failures = 0
    for p in chosen:
        try:
            rows = evaluate_suite([p], actor, prm, configs, audit)
        except PrmSearchError as exc:
            logger.error("rerank failed for %s: %s", p.id, exc)
            failures += 1
            continue
        for c, r in zip(configs, rows):
            totals[c.label].correct += r.correct
            totals[c.label].total += r.total
    rows = list(totals.values())
    out = cfg.path("rerank_report")
    write_text(out / "accuracy.csv", rows_to_csv(rows))
    write_text(out / "accuracy.json", rows_to_json(rows))
    write_text(out / "audit.jsonl", "".join(canonical_json(a) + "\n" for a in audit))
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_ITEM_FAILURES if failures else EXIT_OK


# --- verify-traces --------------------------------------------------------

def cmd_verify_traces(paths: Sequence[str]) -> int:
    files = []
    for raw in paths:
        p = Path(raw)
        files += sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
    if not files:
        raise ConfigError("no trace files given")
    bad = 0
    for f in files:
        problems = check_trace(read_jsonl(f))
        status = "ok" if not problems else f"{len(problems)} violations"
        print(f"{f}: {status}")
        for msg in problems[:10]:
            print(f"  {msg}")
        bad += bool(problems)
    return EXIT_ITEM_FAILURES if bad else EXIT_OK


# --- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prmsearch", description=__doc__)
    parser.add_argument("-c", "--config", help="YAML run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set search.tau=0.4 (repeatable)")
    parser.add_argument("--seed", type=int, help="run seed (overrides file and environment)")
    parser.add_argument("--workers", type=int, help="max problems processed in parallel")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="rank problems by reward variance and write an id list")
    p.add_argument("--top-fraction", type=float)

    p = sub.add_parser("search", help="run tree search per selected problem")
    p.add_argument("--ids", nargs="+", help="problem ids (default: the configured id list)")

    sub.add_parser("build-data", help="filter trajectories, inject errors, critique dialogues, export datasets")

    p = sub.add_parser("rerank", help="evaluate Best-of-N strategies against gold answers")
    p.add_argument("--n", type=int, nargs="+", dest="n_values", help="candidate counts (default from config)")
    p.add_argument("--ids", nargs="+")

    p = sub.add_parser("verify-traces", help="check search traces for tree invariants")
    p.add_argument("paths", nargs="+", help="trace files or directories of *.jsonl")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logger.debug("numeric kernels: %s", _kernels.backend_name())
    try:
        if args.command == "verify-traces":
            return cmd_verify_traces(args.paths)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "select":
            return cmd_select(cfg, args.top_fraction)
        if args.command == "search":
            return cmd_search(cfg, args.ids)
        if args.command == "build-data":
            return cmd_build_data(cfg)
        return cmd_rerank(cfg, args.n_values, args.ids)
    except PrmSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
