"""Manufactures the training datasets: SFT prompt pairs, DPO preference
triplets (with iterative rounds), and negative-prompt records.

Emitted files are byte-deterministic; external trainers consume them as-is.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendSuite, ChatClientBase
from .evolution import EvolutionRun, PromptCandidate, evaluate, run_key
from .scores import ScoreVector, overall
from .templates import (
    DEFAULT_NEGATIVE_FEW_SHOTS,
    FIXED_NEGATIVE_PROMPT,
    SFT_TEMPLATES,
    negative_icl_prompt,
    sft_user_content,
)
from .util import atomic_write_text, sha256_hex, write_jsonl

log = logging.getLogger(__name__)

# Advisory hyperparameters recorded for the external trainer; nothing here
# performs weight updates.
SFT_TRAINER_DEFAULTS = {"epochs": 14, "batch_size": 16, "learning_rate": 1e-4, "adapter": "lora"}
DPO_TRAINER_DEFAULTS = {"epochs": 3, "batch_size": 32, "learning_rate": 5e-5}


@dataclass(frozen=True)
class SftPair:
    source: str
    target: str
    instruction: str
    threshold_met: bool
    run_id: str
    target_overall: float

    def __post_init__(self):
        if not self.target.strip():
            raise ValueError("target prompt is empty")
        if self.source.strip() == self.target.strip():
            raise ValueError("source and target are identical")


@dataclass(frozen=True)
class DpoTriplet:
    prompt: str
    chosen: str
    rejected: str
    chosen_overall: float
    rejected_overall: float
    round: int
    chosen_scores: Optional[ScoreVector] = None
    rejected_scores: Optional[ScoreVector] = None

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected are identical")
        if not self.chosen_overall > self.rejected_overall:
            raise ValueError("chosen must outscore rejected")


@dataclass(frozen=True)
class NegativePromptRecord:
    positive: str
    negative: str
    strategy: str  # fixed | icl | tuned_pair

    def __post_init__(self):
        validate_negative(self.positive, self.negative)


# ---------------------------------------------------------------------------
# SFT pairs
# ---------------------------------------------------------------------------


def build_sft_dataset(runs: Sequence[EvolutionRun], *, require_threshold: bool = False,
                      instruction: str = "sft-chat-default") -> tuple[list[SftPair], dict]:
    """One (source, refined) pair per finalized run, in input order.

    Runs whose refinement is a no-op (final text equals the source) and runs
    failing the threshold filter are counted in the summary, not errors.
    """
    if instruction not in SFT_TEMPLATES:
        raise ValueError(f"unknown SFT instruction template: {instruction!r}")
    pairs: list[SftPair] = []
    summary = {"runs": len(runs), "emitted": 0, "excluded_identity": 0,
               "excluded_threshold": 0}
    for run in runs:
        if run.final is None:
            raise ValueError(f"run {run_key(run.source.text)} is not finalized")
        final_id, threshold_met = run.final
        final = run.candidates()[final_id]
        if require_threshold and not threshold_met:
            summary["excluded_threshold"] += 1
            continue
        if final.text.strip() == run.source.text.strip():
            summary["excluded_identity"] += 1
            continue
        pairs.append(SftPair(
            source=run.source.text,
            target=final.text,
            instruction=instruction,
            threshold_met=threshold_met,
            run_id=run_key(run.source.text),
            target_overall=overall(final.scores),
        ))
        summary["emitted"] += 1
    return pairs, summary


def sft_dialog(pair: SftPair) -> dict:
    """Chat-format record: instruction-framed user turn, refined prompt as assistant."""
    return {
        "dialog": [
            {"role": "user", "content": sft_user_content(pair.source, pair.instruction)},
            {"role": "assistant", "content": pair.target},
        ]
    }


def emit_sft_jsonl(pairs: Sequence[SftPair], path: Path | str, *, meta: Optional[dict] = None) -> None:
    """Write dialog JSONL plus a <path>.meta.json sidecar with trainer advice."""
    write_jsonl(path, [sft_dialog(p) for p in pairs])
    sidecar = {
        "count": len(pairs),
        "instructions": sorted({p.instruction for p in pairs}),
        "trainer": SFT_TRAINER_DEFAULTS,
    }
    if meta:
        sidecar.update(meta)
    atomic_write_text(f"{path}.meta.json",
                      json.dumps(sidecar, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# DPO triplets
# ---------------------------------------------------------------------------


def plan_dpo_iterations(rounds: int = 2) -> list[dict]:
    """Schedule of sampling sources: round 1 samples the SFT model, round r
    samples the model trained on round r-1's triplets."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return [{"round": r, "sample_from": "sft" if r == 1 else f"dpo-{r - 1}"}
            for r in range(1, rounds + 1)]


def build_dpo_round(sources: Sequence[str], sampler: ChatClientBase, suite: BackendSuite, *,
                    k: int = 5, margin: float = 0.05, round_no: int = 1,
                    resample_budget: Optional[int] = None,
                    instruction: str = "sft-chat-default") -> tuple[list[DpoTriplet], dict]:
    """Sample k refinements per source, score them, and keep best/worst as a triplet.

    Duplicate samples are resampled within a budget; sources ending with fewer
    than two distinct candidates, or with a best-worst gap under the margin,
    are skipped and counted.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if margin <= 0:
        raise ValueError("margin must be positive")
    if round_no < 1:
        raise ValueError("round_no must be >= 1")
    budget = k + (resample_budget if resample_budget is not None else k)
    triplets: list[DpoTriplet] = []
    summary = {"sources": len(sources), "emitted": 0,
               "skipped_margin": 0, "skipped_few_candidates": 0, "round": round_no}

    for source in sources:
        key = sha256_hex(source)[:12]
        texts: list[str] = []
        samples = 0
        while len(texts) < k and samples < budget:
            request = sampler.request(sft_user_content(source, instruction),
                                      sample_tag=f"dpo/r{round_no}/{key}/s{samples}")
            samples += 1
            text = sampler.chat(request).content.strip()
            if text and text not in texts:
                texts.append(text)
        if len(texts) < 2:
            summary["skipped_few_candidates"] += 1
            log.warning("source %s: only %d distinct candidate(s) after %d samples",
                        key, len(texts), samples)
            continue

        candidates = [PromptCandidate(id=i, text=t, provenance="evolved", iteration=round_no)
                      for i, t in enumerate(texts)]
        evaluate(candidates, suite)
        scored = [(c.id, overall(c.scores), c) for c in candidates if c.scores is not None]
        if len(scored) < 2:
            summary["skipped_few_candidates"] += 1
            continue
        best = worst = scored[0]
        for item in scored[1:]:
            if item[1] > best[1]:
                best = item
            if item[1] < worst[1]:
                worst = item
        if best[1] - worst[1] < margin:
            summary["skipped_margin"] += 1
            continue
        triplets.append(DpoTriplet(
            prompt=source,
            chosen=best[2].text,
            rejected=worst[2].text,
            chosen_overall=best[1],
            rejected_overall=worst[1],
            round=round_no,
            chosen_scores=best[2].scores,
            rejected_scores=worst[2].scores,
        ))
        summary["emitted"] += 1
    return triplets, summary


def emit_dpo_jsonl(triplets: Sequence[DpoTriplet], path: Path | str, *,
                   meta: Optional[dict] = None) -> None:
    """Write {prompt, chosen, rejected} JSONL plus a sidecar with per-triplet
    score sums (recomputable from the stored per-metric scores)."""
    write_jsonl(path, [{"prompt": t.prompt, "chosen": t.chosen, "rejected": t.rejected}
                       for t in triplets])
    details = []
    for t in triplets:
        details.append({
            "round": t.round,
            "chosen_overall": t.chosen_overall,
            "rejected_overall": t.rejected_overall,
            "margin": t.chosen_overall - t.rejected_overall,
            "chosen_scores": t.chosen_scores.to_json_obj() if t.chosen_scores else None,
            "rejected_scores": t.rejected_scores.to_json_obj() if t.rejected_scores else None,
        })
    sidecar = {
        "count": len(triplets),
        "rounds": sorted({t.round for t in triplets}),
        "triplets": details,
        "trainer": DPO_TRAINER_DEFAULTS,
    }
    if meta:
        sidecar.update(meta)
    atomic_write_text(f"{path}.meta.json",
                      json.dumps(sidecar, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Negative prompts
# ---------------------------------------------------------------------------


def _subject_clause(positive: str) -> str:
    """First clause of the first sentence; the part a negative must not restate."""
    first_sentence = positive.split(".")[0]
    return first_sentence.split(",")[0].strip()


def validate_negative(positive: str, negative: str) -> None:
    """Negatives are comma-separated descriptors that never restate the subject."""
    if not negative.strip():
        raise ValueError("negative prompt is empty")
    if "," not in negative:
        raise ValueError("negative prompt must be a comma-separated descriptor list")
    clause = _subject_clause(positive)
    if len(clause) >= 12 and clause.lower() in negative.lower():
        raise ValueError("negative prompt restates the positive's subject clause")


def make_negative(positive: str, strategy: str, llm: Optional[ChatClientBase] = None,
                  few_shots: Optional[Sequence[tuple[str, str]]] = None) -> NegativePromptRecord:
    """Produce one negative-prompt record.

    fixed: the global negative prompt, identical for every input. icl: few-shot
    generation from curated refined->negative exemplars. tuned_pair: same
    generation, recorded for emission as training pairs for an external tuner.
    A generated negative violating the descriptor shape is retried once.
    """
    if strategy == "fixed":
        return NegativePromptRecord(positive=positive, negative=FIXED_NEGATIVE_PROMPT,
                                    strategy="fixed")
    if strategy not in ("icl", "tuned_pair"):
        raise ValueError(f"unknown negative-prompt strategy: {strategy!r}")
    if llm is None:
        raise ValueError(f"strategy {strategy!r} requires an LLM client")
    shots = tuple(few_shots) if few_shots is not None else DEFAULT_NEGATIVE_FEW_SHOTS
    prompt = negative_icl_prompt(positive, shots)
    key = sha256_hex(positive)[:12]
    last_error: Optional[ValueError] = None
    for attempt in range(2):
        response = llm.chat(llm.request(prompt, sample_tag=f"negative/{key}/a{attempt}"))
        try:
            return NegativePromptRecord(positive=positive,
                                        negative=response.content.strip(),
                                        strategy=strategy)
        except ValueError as exc:
            last_error = exc
            log.warning("negative for %s rejected (attempt %d): %s", key, attempt + 1, exc)
    raise last_error


def emit_negative_records_jsonl(records: Sequence[NegativePromptRecord], path: Path | str) -> None:
    write_jsonl(path, [{"positive": r.positive, "negative": r.negative, "strategy": r.strategy}
                       for r in records])


def emit_negative_pairs_jsonl(records: Sequence[NegativePromptRecord], path: Path | str) -> None:
    """Training pairs in the SFT dialog shape, for externally tuning a negative-prompt model."""
    rows = []
    for r in records:
        rows.append({
            "dialog": [
                {"role": "user", "content": negative_icl_prompt(r.positive, ())},
                {"role": "assistant", "content": r.negative},
            ]
        })
    write_jsonl(path, rows)
