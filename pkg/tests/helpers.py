"""Shared test data and builders: the first-iteration example rows and
ready-made mock backend suites."""

from __future__ import annotations

import copy

from promptevo.backends import (
    BackendSuite,
    ChatClientBase,
    MockGenerationClient,
    ScorerDescriptor,
    StaticChatClient,
    SyntheticScorer,
)
from promptevo.config import DEFAULTS, AppConfig, _merge
from promptevo.scores import CORE_METRICS, MetricScale, ScoreVector, ThresholdPolicy
from promptevo.evolution import EvolutionConfig

ORIGINAL = "Attractive blonde woman doing hand massage in a spa center"
REFINED1 = (
    "A serene scene in a spa center where an attractive blonde woman is performing a "
    "hand massage. The woman has a focused expression and is working gently. The "
    "surroundings are tranquil, with soft lighting and calming decor. The environment "
    "suggests a soothing and relaxing experience. The video does not contain any text "
    "or drastic actions."
)
REFINED2 = (
    "A close-up of a blonde woman giving a hand massage in a quiet spa center. The "
    "woman's hands are applying gentle pressure, with a serene and focused expression "
    "on her face. The spa environment features soft lighting, adding to the calm and "
    "relaxing atmosphere. The scene is peaceful and intimate, designed to convey "
    "comfort and care. No text or significant movements are present in the video."
)
REFINED3 = (
    "An intimate view of a serene spa center with a blonde woman performing a hand "
    "massage. The woman appears focused and gentle, with the peaceful surroundings "
    "enhancing the calming effect. Soft, ambient lighting highlights the tranquility "
    "of the spa. The overall ambiance is relaxing, aiming to provide a sense of "
    "comfort and well-being. The video maintains a focus on the woman and her actions "
    "without any text"
)

FIXTURE_TEXTS = {0: ORIGINAL, 1: REFINED1, 2: REFINED2, 3: REFINED3}

FIXTURE_ROWS = {
    0: {"VQ": 2.47, "TC": 2.66, "DD": 2.84, "TVA": 2.77, "FC": 2.48, "AES": 3.34, "MPS": 2.7},
    1: {"VQ": 2.63, "TC": 2.73, "DD": 2.92, "TVA": 2.95, "FC": 2.42, "AES": 3.49, "MPS": 3.67},
    2: {"VQ": 2.58, "TC": 2.77, "DD": 2.88, "TVA": 2.98, "FC": 2.56, "AES": 3.47, "MPS": 3.04},
    3: {"VQ": 2.58, "TC": 2.69, "DD": 2.77, "TVA": 2.88, "FC": 2.47, "AES": 3.61, "MPS": 3.43},
}

# Hand-added sums of the rows above.
FIXTURE_SUMS = {0: 19.26, 1: 20.81, 2: 20.28, 3: 20.43}


def fixture_vector(idx: int) -> ScoreVector:
    return ScoreVector.from_normalized(FIXTURE_ROWS[idx])


def fixture_population() -> list[tuple[int, ScoreVector]]:
    return [(i, fixture_vector(i)) for i in range(4)]


def identity_scales() -> dict[str, MetricScale]:
    """Target scale used directly as the raw scale (normalize is the identity)."""
    return {m: MetricScale(m, 0.0, 5.0, 0.0, 5.0) for m in CORE_METRICS}


def zero_thresholds() -> ThresholdPolicy:
    return ThresholdPolicy(per_metric_min={m: 0.0 for m in CORE_METRICS})


def fixture_scorer(rows_by_text=None, **kw) -> SyntheticScorer:
    """One scorer producing all seven metrics on the identity scale."""
    scales = identity_scales()
    descriptor = ScorerDescriptor(name="fixture", metrics=CORE_METRICS, scales=scales)
    return SyntheticScorer(descriptor, seed="fixture", vocabulary=(),
                           fixture=rows_by_text, **kw)


def fixture_suite(operator: ChatClientBase | None = None, rows_by_text=None) -> BackendSuite:
    """Suite replaying a text -> scores table, with a pluggable operator."""
    if operator is None:
        operator = StaticChatClient("no operator configured")
    return BackendSuite(
        operator=operator,
        generator=MockGenerationClient(seed="fixture-gen"),
        scorers=[fixture_scorer(rows_by_text)],
        scales=identity_scales(),
        evaluate_workers=1,
    )


class SequencedSampler(ChatClientBase):
    """Returns canned candidate texts indexed by the request's sample tag."""

    kind = "chat"

    def __init__(self, texts, **kw):
        super().__init__("sequenced", **kw)
        self.texts = list(texts)

    def _fingerprint(self):
        return {"sequenced": True}

    def _invoke(self, payload):
        index = int(payload["sample_tag"].rsplit("/s", 1)[1])
        return {"content": self.texts[index % len(self.texts)],
                "finish_reason": "stop", "usage": {}}


def appendix_operator() -> StaticChatClient:
    """Operator that always answers with the three refined example prompts."""
    body = "".join(f"<PROMPT>{FIXTURE_TEXTS[i]}</PROMPT>\n" for i in (1, 2, 3))
    return StaticChatClient(body)


def appendix_suite() -> BackendSuite:
    rows = {FIXTURE_TEXTS[i]: FIXTURE_ROWS[i] for i in range(4)}
    return fixture_suite(operator=appendix_operator(), rows_by_text=rows)


def appendix_config(**overrides) -> EvolutionConfig:
    defaults = dict(thresholds=zero_thresholds(), max_iterations=1,
                    offspring_per_iteration=3, top_n=3)
    defaults.update(overrides)
    return EvolutionConfig(**defaults)


def app_config(**overrides) -> AppConfig:
    """Resolved AppConfig: the documented defaults plus overrides."""
    return AppConfig(_merge(copy.deepcopy(DEFAULTS), overrides))
