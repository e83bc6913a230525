"""Numerical evaluators for the two training objectives.

These validate emitted datasets and monitor external trainers; no gradients
ever flow into a model from here. All functions are pure scalar math.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

_LOGPROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SftNllInput:
    """Per-token log-probabilities of the target given instruction and source."""

    token_logprobs: tuple[float, ...]
    reduction: str = "mean"  # or "sum"

    def __post_init__(self):
        if not self.token_logprobs:
            raise ValueError("token_logprobs must be nonempty")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction: {self.reduction!r}")
        for lp in self.token_logprobs:
            if not lp <= _LOGPROB_TOLERANCE:
                raise ValueError(f"log-probability {lp} is positive")


def sft_nll(inp: SftNllInput) -> float:
    """Negative log-likelihood of the target tokens, mean- or sum-reduced."""
    total = -sum(inp.token_logprobs)
    if inp.reduction == "mean":
        return total / len(inp.token_logprobs)
    return total


@dataclass(frozen=True)
class DpoLossInput:
    """Policy and reference log-probs of the chosen/rejected completions."""

    logp_policy_chosen: float
    logp_policy_rejected: float
    logp_ref_chosen: float
    logp_ref_rejected: float
    beta: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        for name in ("logp_policy_chosen", "logp_policy_rejected",
                     "logp_ref_chosen", "logp_ref_rejected"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def margin_z(self) -> float:
        """Log-ratio margin: (policy - ref) on chosen minus (policy - ref) on rejected."""
        return ((self.logp_policy_chosen - self.logp_ref_chosen)
                - (self.logp_policy_rejected - self.logp_ref_rejected))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def softplus(x: float) -> float:
    """log(1 + exp(x)) without overflow for large |x|."""
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def dpo_loss(inp: DpoLossInput) -> float:
    """Preference loss -log sigmoid(beta * z), computed in softplus form."""
    return softplus(-inp.beta * inp.margin_z())


@dataclass(frozen=True)
class DpoGradients:
    d_logp_policy_chosen: float
    d_logp_policy_rejected: float
    d_logp_ref_chosen: float
    d_logp_ref_rejected: float


def dpo_loss_grad(inp: DpoLossInput) -> DpoGradients:
    """Analytic gradient of dpo_loss with respect to the four log-probs.

    With s = sigmoid(-beta * z): d/d policy_chosen = -beta * s, d/d
    policy_rejected = +beta * s; reference gradients are the respective
    negations because they enter z with opposite sign.
    """
    s = sigmoid(-inp.beta * inp.margin_z())
    g = inp.beta * s
    return DpoGradients(
        d_logp_policy_chosen=-g,
        d_logp_policy_rejected=g,
        d_logp_ref_chosen=g,
        d_logp_ref_rejected=-g,
    )


def dataset_dpo_report(inputs: Iterable[DpoLossInput]) -> dict:
    """Mean loss and mean implicit margin (beta * z) over a dataset."""
    losses = []
    margins = []
    for inp in inputs:
        losses.append(dpo_loss(inp))
        margins.append(inp.beta * inp.margin_z())
    if not losses:
        raise ValueError("cannot aggregate over an empty dataset")
    n = len(losses)
    return {"count": n, "mean_loss": sum(losses) / n, "mean_margin": sum(margins) / n}


def read_logprob_fixtures(path: Path | str, beta: float = 0.1) -> list[DpoLossInput]:
    """Load a JSONL fixture of per-triplet log-probs.

    Each line: {"prompt": ..., "chosen_lp": ..., "rejected_lp": ...,
    "ref_chosen_lp": ..., "ref_rejected_lp": ...}.
    """
    inputs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            inputs.append(DpoLossInput(
                logp_policy_chosen=row["chosen_lp"],
                logp_policy_rejected=row["rejected_lp"],
                logp_ref_chosen=row["ref_chosen_lp"],
                logp_ref_rejected=row["ref_rejected_lp"],
                beta=beta,
            ))
    return inputs
