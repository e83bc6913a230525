"""Reward-guided evolutionary prompt optimization for text-to-video generation,
plus SFT pair / DPO triplet dataset manufacturing for external trainers."""

__version__ = "0.1.0"

from .scores import (  # noqa: F401
    CORE_METRICS,
    MetricScale,
    ScoreVector,
    ThresholdPolicy,
    normalize,
    overall,
    passes_thresholds,
    rank,
    select_top_n,
)
from .evolution import (  # noqa: F401
    EvolutionConfig,
    EvolutionRun,
    PromptCandidate,
    finalize,
    iteration_report,
    parse_operator_response,
    render_operator_prompt,
    run_evolution,
    step,
)
from .datasets import (  # noqa: F401
    DpoTriplet,
    NegativePromptRecord,
    SftPair,
    build_dpo_round,
    build_sft_dataset,
    emit_dpo_jsonl,
    emit_sft_jsonl,
    make_negative,
    plan_dpo_iterations,
)
from .objectives import (  # noqa: F401
    DpoLossInput,
    SftNllInput,
    dataset_dpo_report,
    dpo_loss,
    dpo_loss_grad,
    sft_nll,
)
