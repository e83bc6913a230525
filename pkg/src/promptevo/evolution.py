"""Evolutionary prompt refinement: the evaluate / select / evolve loop.

One run refines one source prompt. The LLM operator is the only variation
mechanism; survival is deterministic top-N over parents merged with offspring,
so the best population score never decreases.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendError, BackendSuite, GenerationRequest
from .scores import (
    ScoreVector,
    ThresholdPolicy,
    overall,
    passes_thresholds,
    rank,
    select_top_n,
    select_top_n_pareto,
)
from .templates import OPERATOR_TEMPLATES
from .util import atomic_write_text, sha256_hex, write_jsonl

log = logging.getLogger(__name__)


class ParseError(Exception):
    pass


class WrongCount(ParseError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"expected {expected} prompts, found {found}")
        self.found = found
        self.expected = expected


class EmptyPrompt(ParseError):
    def __init__(self, index: int):
        super().__init__(f"prompt span {index} is empty")
        self.index = index


class UnclosedTag(ParseError):
    def __init__(self, position: int):
        super().__init__(f"opening tag at offset {position} has no closing tag")
        self.position = position


class RunAborted(Exception):
    """Raised when an iteration loses every candidate to backend failures."""


@dataclass
class PromptCandidate:
    """A prompt in a run: id 0 is always the source prompt."""

    id: int
    text: str
    provenance: str = "original"  # or "evolved"
    iteration: int = 0
    artifact_ref: Optional[str] = None
    scores: Optional[ScoreVector] = None
    error: Optional[str] = None

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "provenance": self.provenance,
            "iteration": self.iteration,
            "artifact_ref": self.artifact_ref,
            "scores": self.scores.to_json_obj() if self.scores else None,
            "error": self.error,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PromptCandidate":
        scores = ScoreVector.from_json_obj(obj["scores"]) if obj.get("scores") else None
        return cls(id=obj["id"], text=obj["text"], provenance=obj["provenance"],
                   iteration=obj["iteration"], artifact_ref=obj.get("artifact_ref"),
                   scores=scores, error=obj.get("error"))


@dataclass(frozen=True)
class EvolutionConfig:
    thresholds: ThresholdPolicy
    max_iterations: int = 4
    offspring_per_iteration: int = 3
    top_n: int = 3
    operator_instruction: str = "t2v-default"
    parse_retries: int = 2
    selection_rule: str = "sum"  # or "pareto"

    def __post_init__(self):
        if self.max_iterations < 1 or self.offspring_per_iteration < 1 or self.top_n < 1:
            raise ValueError("iteration, offspring, and top-n counts must all be >= 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be >= 0")
        if self.operator_instruction not in OPERATOR_TEMPLATES:
            raise ValueError(f"unknown operator template: {self.operator_instruction!r}")
        if self.selection_rule not in ("sum", "pareto"):
            raise ValueError(f"unknown selection rule: {self.selection_rule!r}")


@dataclass
class EvolutionRun:
    source: PromptCandidate
    config: EvolutionConfig
    population: list[int] = field(default_factory=list)
    history: list[list[PromptCandidate]] = field(default_factory=list)
    population_log: list[list[int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    final: Optional[tuple[int, bool]] = None

    def candidates(self) -> dict[int, PromptCandidate]:
        return {c.id: c for iteration in self.history for c in iteration}

    def evaluated(self) -> list[PromptCandidate]:
        return [c for iteration in self.history for c in iteration if c.scores is not None]

    def next_id(self) -> int:
        ids = [c.id for iteration in self.history for c in iteration]
        return max(ids) + 1 if ids else 1

    def iterations_done(self) -> int:
        """Offspring iterations so far (history slot 0 holds the source)."""
        return max(0, len(self.history) - 1)


def run_key(source_text: str) -> str:
    return sha256_hex(source_text)[:12]


# ---------------------------------------------------------------------------
# Operator prompt rendering and response parsing
# ---------------------------------------------------------------------------


def _candidate_line(candidate: PromptCandidate) -> str:
    sv = candidate.scores
    formatted = ", ".join(f"{sv.normalized[m]:.2f}" for m in sv.metric_set)
    return f"{candidate.id}. {candidate.text} ({formatted})"


def render_operator_prompt(source: PromptCandidate, selected: Sequence[PromptCandidate],
                           cfg: EvolutionConfig) -> str:
    """Instruction block plus the scored candidate list, source always first.

    Selected candidates must already be in rank order; all candidates must be
    scored. Scores are rendered normalized, two decimals, in metric-set order.
    """
    for candidate in (source, *selected):
        if candidate.scores is None:
            raise ValueError(f"candidate {candidate.id} is not scored")
    instruction = OPERATOR_TEMPLATES[cfg.operator_instruction].format(
        offspring_count=cfg.offspring_per_iteration
    )
    lines = [_candidate_line(source)]
    lines.extend(_candidate_line(c) for c in selected if c.id != source.id)
    return instruction + "\n\n" + "\n".join(lines)


_OPEN = "<PROMPT>"
_CLOSE = "</PROMPT>"


def extract_prompt_spans(raw: str, *, strict: bool = True) -> list[str]:
    """All <PROMPT>...</PROMPT> span contents, in order, whitespace-trimmed.

    With strict=True an opening tag without a closing tag raises UnclosedTag;
    otherwise the dangling tail is ignored.
    """
    spans = []
    pos = 0
    while True:
        start = raw.find(_OPEN, pos)
        if start == -1:
            return spans
        end = raw.find(_CLOSE, start + len(_OPEN))
        if end == -1:
            if strict:
                raise UnclosedTag(start)
            return spans
        spans.append(raw[start + len(_OPEN):end].strip())
        pos = end + len(_CLOSE)


def parse_operator_response(raw: str, expected: int) -> list[str]:
    """Validated span extraction: exactly `expected` spans, all nonempty.

    Raises UnclosedTag for a dangling opening tag, WrongCount when the span
    count differs (empty spans still count), then EmptyPrompt for blank spans.
    """
    spans = extract_prompt_spans(raw, strict=True)
    if len(spans) != expected:
        raise WrongCount(found=len(spans), expected=expected)
    for i, span in enumerate(spans):
        if not span:
            raise EmptyPrompt(i)
    return spans


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(candidates: Sequence[PromptCandidate], suite: BackendSuite) -> list[PromptCandidate]:
    """Generate an artifact and assemble a full ScoreVector for each candidate.

    Backend failures mark the candidate failed (error set, no scores) instead
    of aborting. Per-candidate work fans out over a bounded thread pool; all
    results are joined before returning.
    """
    for candidate in candidates:
        if candidate.scores is not None:
            raise ValueError(f"candidate {candidate.id} is already scored")

    def score_one(candidate: PromptCandidate) -> None:
        try:
            gen = suite.generator.generate(GenerationRequest(prompt=candidate.text))
            raws: dict[str, float] = {}
            for scorer in suite.scorers:
                raws.update(scorer.score(gen.artifact_ref, candidate.text))
            candidate.artifact_ref = gen.artifact_ref
            candidate.scores = ScoreVector.from_raw(raws, suite.scales)
        except BackendError as exc:
            candidate.error = f"{type(exc).__name__}: {exc}"
            log.warning("candidate %d failed evaluation: %s", candidate.id, candidate.error)

    workers = max(1, min(suite.evaluate_workers, len(candidates)))
    if workers == 1 or len(candidates) <= 1:
        for candidate in candidates:
            score_one(candidate)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(score_one, candidates))
    return list(candidates)


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def new_run(source_text: str, cfg: EvolutionConfig) -> EvolutionRun:
    source = PromptCandidate(id=0, text=source_text, provenance="original", iteration=0)
    return EvolutionRun(source=source, config=cfg)


def start_run(run: EvolutionRun, suite: BackendSuite) -> EvolutionRun:
    """Evaluate the source prompt and seed the population with it."""
    if run.history:
        raise ValueError("run already started")
    evaluate([run.source], suite)
    if run.source.scores is None:
        raise RunAborted(f"source prompt failed evaluation: {run.source.error}")
    run.history.append([run.source])
    run.population = [0]
    run.population_log.append([0])
    return run


def _select(pool: list[tuple[int, ScoreVector]], cfg: EvolutionConfig) -> list[int]:
    if cfg.selection_rule == "pareto":
        return select_top_n_pareto(pool, cfg.top_n)
    return select_top_n(pool, cfg.top_n)


def step(run: EvolutionRun, suite: BackendSuite) -> EvolutionRun:
    """One evolve-evaluate-select cycle; appends the iteration to history."""
    if run.final is not None:
        raise ValueError("run is already finalized")
    if not run.history:
        raise ValueError("run not started; evaluate the source prompt first")
    cfg = run.config
    iteration = len(run.history)
    if iteration > cfg.max_iterations:
        raise ValueError(f"max_iterations={cfg.max_iterations} exhausted")

    by_id = run.candidates()
    selected = [by_id[cid] for cid in run.population if cid != 0]
    rendered = render_operator_prompt(run.source, selected, cfg)
    key = run_key(run.source.text)

    texts: list[str] = []
    last_error: Optional[ParseError] = None
    for attempt in range(cfg.parse_retries + 1):
        request = suite.operator.request(rendered, sample_tag=f"evolve/{key}/it{iteration}/a{attempt}")
        response = suite.operator.chat(request)
        try:
            texts = parse_operator_response(response.content, cfg.offspring_per_iteration)
            last_error = None
            break
        except ParseError as exc:
            last_error = exc
            salvaged = [s for s in extract_prompt_spans(response.content, strict=False) if s]
            if len(salvaged) > len(texts):
                texts = salvaged[:cfg.offspring_per_iteration]
    if last_error is not None and texts:
        run.warnings.append(
            f"iteration {iteration}: operator output degraded ({last_error}); "
            f"proceeding with {len(texts)} prompt(s)"
        )

    seen = {c.text for c in by_id.values()}
    fresh: list[str] = []
    for text in texts:
        if text not in seen:
            seen.add(text)
            fresh.append(text)

    if not fresh:
        reason = str(last_error) if last_error else "no new prompt texts after dedup"
        run.warnings.append(f"iteration {iteration}: skipped ({reason})")
        run.history.append([])
        run.population_log.append(list(run.population))
        return run

    next_id = run.next_id()
    offspring = [
        PromptCandidate(id=next_id + i, text=text, provenance="evolved", iteration=iteration)
        for i, text in enumerate(fresh)
    ]
    evaluate(offspring, suite)
    run.history.append(offspring)

    scored = [c for c in offspring if c.scores is not None]
    if not scored:
        raise RunAborted(f"iteration {iteration}: every offspring failed evaluation")

    pool = [(cid, by_id[cid].scores) for cid in run.population]
    pool.extend((c.id, c.scores) for c in scored)
    run.population = _select(pool, cfg)
    run.population_log.append(list(run.population))
    return run


def finalize(run: EvolutionRun) -> tuple[PromptCandidate, bool]:
    """Pick the best threshold-passing candidate across the whole history.

    When nothing passes, the fallback policy picks either the global best
    (highest_overall) or the original prompt (reject), flagged threshold_met
    False either way.
    """
    evaluated = run.evaluated()
    if not evaluated:
        raise ValueError("no evaluated candidates in history")
    by_id = {c.id: c for c in evaluated}
    passing = [c for c in evaluated if passes_thresholds(c.scores, run.config.thresholds)]
    if passing:
        best_id = rank([(c.id, c.scores) for c in passing])[0]
        run.final = (best_id, True)
        return by_id[best_id], True
    if run.config.thresholds.fallback == "reject":
        run.final = (0, False)
        return by_id[0], False
    best_id = rank([(c.id, c.scores) for c in evaluated])[0]
    run.final = (best_id, False)
    return by_id[best_id], False


def run_evolution(source_text: str, cfg: EvolutionConfig, suite: BackendSuite) -> EvolutionRun:
    """Full loop: evaluate source, iterate max_iterations times, finalize."""
    run = start_run(new_run(source_text, cfg), suite)
    for _ in range(cfg.max_iterations):
        step(run, suite)
    finalize(run)
    return run


def iteration_report(run: EvolutionRun) -> list[tuple[int, str, float]]:
    """(iteration, metric, mean normalized score) rows over each iteration's offspring."""
    if len(run.history) < 2:
        raise ValueError("run has no completed iterations")
    rows: list[tuple[int, str, float]] = []
    for iteration, offspring in enumerate(run.history[1:], start=1):
        scored = [c for c in offspring if c.scores is not None]
        if not scored:
            continue
        metric_set = scored[0].scores.metric_set
        for metric in metric_set:
            mean = sum(c.scores.normalized[metric] for c in scored) / len(scored)
            rows.append((iteration, metric, mean))
    return rows


# ---------------------------------------------------------------------------
# Run directory persistence
# ---------------------------------------------------------------------------


def report_csv_text(rows: Sequence[tuple[int, str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "metric", "mean"])
    for iteration, metric, mean in rows:
        writer.writerow([iteration, metric, repr(mean)])
    return buf.getvalue()


def save_run(run: EvolutionRun, run_dir: Path | str, config_snapshot: dict,
             config_hash: str) -> None:
    """Write config.json, iterations/<k>.jsonl, final.json, and report.csv."""
    run_dir = Path(run_dir)
    atomic_write_text(run_dir / "config.json",
                      json.dumps({"hash": config_hash, "config": config_snapshot},
                                 ensure_ascii=False, indent=2, sort_keys=True) + "\n")
    for k, iteration in enumerate(run.history):
        write_jsonl(run_dir / "iterations" / f"{k}.jsonl",
                    [c.to_json_obj() for c in iteration])
    if run.final is not None:
        final_id, threshold_met = run.final
        final = run.candidates()[final_id]
        payload = {
            "run_id": run_key(run.source.text),
            "source": run.source.text,
            "final_id": final_id,
            "final_text": final.text,
            "overall": overall(final.scores),
            "threshold_met": threshold_met,
            "warnings": run.warnings,
            "config_hash": config_hash,
        }
        atomic_write_text(run_dir / "final.json",
                          json.dumps(payload, ensure_ascii=False, indent=2) + "\n")
    rows = iteration_report(run) if len(run.history) > 1 else []
    atomic_write_text(run_dir / "report.csv", report_csv_text(rows))


def load_run(run_dir: Path | str, cfg: EvolutionConfig) -> EvolutionRun:
    """Rebuild an EvolutionRun from a persisted run directory."""
    run_dir = Path(run_dir)
    iterations_dir = run_dir / "iterations"
    if not iterations_dir.is_dir():
        raise FileNotFoundError(f"{iterations_dir} does not exist")
    history: list[list[PromptCandidate]] = []
    for k in range(len(list(iterations_dir.glob("*.jsonl")))):
        path = iterations_dir / f"{k}.jsonl"
        with open(path, "r", encoding="utf-8") as fh:
            history.append([PromptCandidate.from_json_obj(json.loads(line))
                            for line in fh if line.strip()])
    if not history or not history[0]:
        raise ValueError(f"{run_dir} has no evaluated source prompt")
    run = EvolutionRun(source=history[0][0], config=cfg, history=history)
    final_path = run_dir / "final.json"
    if final_path.exists():
        final = json.loads(final_path.read_text(encoding="utf-8"))
        run.final = (final["final_id"], final["threshold_met"])
        run.warnings = list(final.get("warnings", []))
    # population is a step-time construct; recompute the final selection view
    evaluated = run.evaluated()
    if evaluated:
        pool = [(c.id, c.scores) for c in evaluated]
        run.population = _select(pool, cfg)
    return run
