"""Command-line surface: evolve, build-sft, build-dpo, report, dpo-loss,
make-negatives. Exit codes: 0 success, 2 config error, 3 input error,
4 backend exhaustion, 1 anything else."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .backends import BackendError, RetriesExhausted
from .config import (
    ConfigError,
    config_from_snapshot,
    build_cache,
    build_negatives_client,
    build_sampler,
    build_suite,
    load_config,
)
from .datasets import (
    build_dpo_round,
    build_sft_dataset,
    emit_dpo_jsonl,
    emit_negative_pairs_jsonl,
    emit_negative_records_jsonl,
    emit_sft_jsonl,
    make_negative,
    plan_dpo_iterations,
)
from .evolution import (
    RunAborted,
    iteration_report,
    load_run,
    report_csv_text,
    run_evolution,
    run_key,
    save_run,
)
from .objectives import dataset_dpo_report, read_logprob_fixtures
from .util import atomic_write_text

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_BACKEND = 4


class InputError(Exception):
    pass


def _read_prompts(path: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read prompts file {path}: {exc}") from exc
    prompts = []
    seen = set()
    for line in text.splitlines():
        line = line.strip()
        if line and line not in seen:
            seen.add(line)
            prompts.append(line)
    if not prompts:
        raise InputError(f"prompts file {path} contains no prompts")
    return prompts


def _write_manifest(path: Path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, ensure_ascii=False, indent=2) + "\n")


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------


def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    prompts = _read_prompts(args.prompts)
    out = Path(args.out)
    runs_dir = out / "runs"
    cfg_hash = cfg.hash()

    manifest_path = out / "manifest.json"
    if args.resume and manifest_path.exists():
        previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        if previous.get("config_hash") != cfg_hash:
            raise ConfigError(
                "resume refused: the configuration differs from the one these runs "
                f"were started with (stored {previous.get('config_hash')!r})"
            )

    cache = build_cache(cfg)
    suite = build_suite(cfg, cache)

    manifest = {"config_hash": cfg_hash, "runs": {}, "totals": {}}
    for prompt in prompts:
        manifest["runs"][f"run-{run_key(prompt)}"] = {"prompt": prompt, "status": "pending"}
    lock = threading.Lock()

    def record(rid: str, status: str, error: str | None = None) -> None:
        with lock:
            entry = manifest["runs"][rid]
            if entry["status"] == "finalized":  # transitions are monotone
                return
            entry["status"] = status
            if error is not None:
                entry["error"] = error
            _write_manifest(manifest_path, manifest)

    drift = []
    failures = []
    backend_failures = []
    skipped = []

    def process(prompt: str) -> None:
        rid = f"run-{run_key(prompt)}"
        run_dir = runs_dir / rid
        if args.resume and (run_dir / "final.json").exists():
            stored = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
            if stored.get("hash") != cfg_hash:
                drift.append(rid)
                record(rid, "failed", error="config hash differs from stored run")
                return
            skipped.append(rid)
            record(rid, "finalized")
            return
        record(rid, "in-progress")
        try:
            run = run_evolution(prompt, cfg.evolution, suite)
            save_run(run, run_dir, cfg.snapshot(), cfg_hash)
            record(rid, "finalized")
        except (RunAborted, RetriesExhausted, BackendError) as exc:
            backend_failures.append(rid)
            record(rid, "failed", error=str(exc))
        except Exception as exc:  # keep the batch alive; the manifest records it
            log.exception("run %s failed", rid)
            failures.append(rid)
            record(rid, "failed", error=str(exc))

    workers = min(cfg.concurrency["runs"], len(prompts))
    if workers <= 1:
        for prompt in prompts:
            process(prompt)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(process, prompts))

    finalized = sum(1 for e in manifest["runs"].values() if e["status"] == "finalized")
    failed = sum(1 for e in manifest["runs"].values() if e["status"] == "failed")
    manifest["totals"] = {
        "finalized": finalized,
        "failed": failed,
        "skipped": len(skipped),
        "backend_calls": suite.backend_calls(),
        "cache_hits": cache.hits if cache else 0,
    }
    _write_manifest(manifest_path, manifest)

    print(f"evolve: {finalized} finalized, {failed} failed, {len(skipped)} resumed-skip")
    print(f"backend calls: {manifest['totals']['backend_calls']} "
          f"(cache hits: {manifest['totals']['cache_hits']})")
    if drift:
        print(f"config drift refused for: {', '.join(sorted(drift))}", file=sys.stderr)
        return EXIT_CONFIG
    if backend_failures:
        return EXIT_BACKEND
    if failures:
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# build-sft
# ---------------------------------------------------------------------------


def _load_finalized_runs(runs_root: Path):
    manifest_path = runs_root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"{manifest_path} not found; run `evolve` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    offenders = [rid for rid, entry in manifest["runs"].items()
                 if entry["status"] != "finalized"]
    if offenders:
        raise InputError("runs are not finalized: " + ", ".join(sorted(offenders)))
    runs = []
    instruction = None
    for rid in manifest["runs"]:
        run_dir = runs_root / "runs" / rid
        snapshot = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
        run_cfg = config_from_snapshot(snapshot["config"])
        runs.append(load_run(run_dir, run_cfg.evolution))
        instruction = run_cfg.sft_instruction
    return runs, instruction


def cmd_build_sft(args) -> int:
    runs, instruction = _load_finalized_runs(Path(args.runs))
    pairs, summary = build_sft_dataset(runs, require_threshold=args.require_threshold,
                                       instruction=instruction)
    emit_sft_jsonl(pairs, args.out, meta={"summary": summary})
    print(f"build-sft: {summary['emitted']} pairs "
          f"(identity-excluded: {summary['excluded_identity']}, "
          f"threshold-excluded: {summary['excluded_threshold']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# build-dpo
# ---------------------------------------------------------------------------


def cmd_build_dpo(args) -> int:
    cfg = load_config(args.config)
    sources = _read_prompts(args.sources)
    plan = plan_dpo_iterations(cfg.dpo_rounds)
    if not 1 <= args.round <= len(plan):
        raise InputError(f"--round {args.round} is invalid; configured rounds: 1..{len(plan)}")
    entry = plan[args.round - 1]
    cache = build_cache(cfg)
    suite = build_suite(cfg, cache)
    sampler = build_sampler(cfg, entry["sample_from"], cache)
    triplets, summary = build_dpo_round(
        sources, sampler, suite,
        k=cfg.candidates_per_source, margin=cfg.margin, round_no=args.round,
        instruction=cfg.sft_instruction,
    )
    summary["sample_from"] = entry["sample_from"]
    summary["margin"] = cfg.margin
    summary["backend_calls"] = suite.backend_calls() + sampler.calls
    emit_dpo_jsonl(triplets, args.out, meta={"summary": summary, "plan": plan})
    print(f"build-dpo round {args.round} (from {entry['sample_from']}): "
          f"{summary['emitted']} triplets, "
          f"{summary['skipped_margin']} margin-skipped, "
          f"{summary['skipped_few_candidates']} candidate-skipped")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report / dpo-loss / make-negatives
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise InputError(f"{run_dir} is not a run directory (no config.json)")
    snapshot = json.loads(config_path.read_text(encoding="utf-8"))
    run_cfg = config_from_snapshot(snapshot["config"])
    run = load_run(run_dir, run_cfg.evolution)
    try:
        rows = iteration_report(run)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    text = report_csv_text(rows)
    sys.stdout.write(text)
    atomic_write_text(run_dir / "report.csv", text)
    return EXIT_OK


def cmd_dpo_loss(args) -> int:
    try:
        inputs = read_logprob_fixtures(args.fixtures, beta=args.beta)
    except OSError as exc:
        raise InputError(f"cannot read fixtures {args.fixtures}: {exc}") from exc
    try:
        summary = dataset_dpo_report(inputs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    summary["beta"] = args.beta
    line = json.dumps(summary, ensure_ascii=False, sort_keys=True)
    print(line)
    out = args.out or f"{args.fixtures}.summary.json"
    atomic_write_text(out, line + "\n")
    return EXIT_OK


def cmd_make_negatives(args) -> int:
    cfg = load_config(args.config)
    prompts = _read_prompts(args.prompts)
    strategy = args.strategy or cfg.negative_strategy
    cache = build_cache(cfg)
    llm = None
    if strategy in ("icl", "tuned_pair"):
        llm = build_negatives_client(cfg, cache)
    records = []
    failed = 0
    for prompt in prompts:
        try:
            records.append(make_negative(prompt, strategy, llm=llm,
                                          few_shots=cfg.negative_few_shots))
        except (ValueError, BackendError) as exc:
            failed += 1
            log.warning("negative prompt for %r failed: %s", prompt[:40], exc)
    emit_negative_records_jsonl(records, args.out)
    if strategy == "tuned_pair":
        emit_negative_pairs_jsonl(records, f"{args.out}.pairs.jsonl")
    print(f"make-negatives ({strategy}): {len(records)} records, {failed} failed")
    return EXIT_FAILURE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptevo",
        description="Reward-guided evolutionary prompt optimization and "
                    "SFT/DPO dataset manufacturing.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="refine every prompt in a file through the evolution loop")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--prompts", required=True, help="text file, one source prompt per line")
    p.add_argument("--out", required=True, help="output directory for runs and the manifest")
    p.add_argument("--resume", action="store_true",
                   help="skip finalized runs; refuse on config drift")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("build-sft", help="emit SFT prompt pairs from finalized runs")
    p.add_argument("--runs", required=True, help="the evolve output directory")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--require-threshold", action="store_true",
                   help="drop runs whose final prompt missed the score thresholds")
    p.set_defaults(func=cmd_build_sft)

    p = sub.add_parser("build-dpo", help="sample, score, and emit DPO preference triplets")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--sources", required=True, help="text file, one source prompt per line")
    p.add_argument("--round", type=int, required=True, help="1-based DPO round")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_build_dpo)

    p = sub.add_parser("report", help="per-iteration mean metric report for one run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dpo-loss", help="preference-loss summary over a log-prob fixture file")
    p.add_argument("--fixtures", required=True, help="JSONL of per-triplet log-probs")
    p.add_argument("--beta", type=float, default=0.1, help="DPO temperature (default 0.1)")
    p.add_argument("--out", help="summary JSON path (default <fixtures>.summary.json)")
    p.set_defaults(func=cmd_dpo_loss)

    p = sub.add_parser("make-negatives", help="produce negative prompts for refined prompts")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--prompts", required=True, help="text file of refined prompts")
    p.add_argument("--strategy", choices=["fixed", "icl", "tuned_pair"],
                   help="override the configured strategy")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_make_negatives)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RetriesExhausted, RunAborted) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
