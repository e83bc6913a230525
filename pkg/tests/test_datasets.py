import json
import random
from pathlib import Path

import pytest

from promptevo.backends import StaticChatClient
from promptevo.datasets import (
    DpoTriplet,
    NegativePromptRecord,
    SftPair,
    build_dpo_round,
    build_sft_dataset,
    emit_dpo_jsonl,
    emit_negative_pairs_jsonl,
    emit_negative_records_jsonl,
    emit_sft_jsonl,
    make_negative,
    plan_dpo_iterations,
    sft_dialog,
    validate_negative,
)
from promptevo.evolution import finalize, new_run, start_run, step
from promptevo.scores import CORE_METRICS
from promptevo.templates import (
    DEFAULT_NEGATIVE_FEW_SHOTS,
    FIXED_NEGATIVE_PROMPT,
    parse_sft_user_content,
)

from helpers import (
    FIXTURE_TEXTS,
    ORIGINAL,
    REFINED1,
    SequencedSampler,
    appendix_config,
    appendix_suite,
    fixture_suite,
)

DATA = Path(__file__).parent / "data"


def finalized_run(source=ORIGINAL):
    suite = appendix_suite()
    run = start_run(new_run(source, appendix_config()), suite)
    step(run, suite)
    finalize(run)
    return run


def no_op_run(source="plain prompt"):
    """A run whose best candidate is the source itself (refinement no-op)."""
    operator = StaticChatClient(
        "<PROMPT>worse a</PROMPT><PROMPT>worse b</PROMPT><PROMPT>worse c</PROMPT>"
    )
    rows = {
        source: {m: 4.0 for m in CORE_METRICS},
        "worse a": {m: 1.0 for m in CORE_METRICS},
        "worse b": {m: 1.1 for m in CORE_METRICS},
        "worse c": {m: 1.2 for m in CORE_METRICS},
    }
    suite = fixture_suite(operator=operator, rows_by_text=rows)
    run = start_run(new_run(source, appendix_config()), suite)
    step(run, suite)
    finalize(run)
    return run


def scored_suite(rows_by_text):
    return fixture_suite(rows_by_text=rows_by_text)


class TestBuildSftDataset:
    def test_one_pair_per_finalized_run(self):
        runs = [finalized_run() for _ in range(3)]
        pairs, summary = build_sft_dataset(runs)
        assert len(pairs) == 3
        assert summary["emitted"] == 3
        for pair in pairs:
            assert pair.source == ORIGINAL
            assert pair.target == FIXTURE_TEXTS[1]
            assert pair.threshold_met is True

    def test_identity_refinement_excluded(self):
        pairs, summary = build_sft_dataset([no_op_run()])
        assert pairs == []
        assert summary["excluded_identity"] == 1

    def test_threshold_filter(self):
        from promptevo.scores import ThresholdPolicy

        suite = appendix_suite()
        cfg = appendix_config(
            thresholds=ThresholdPolicy(per_metric_min={"VQ": 5.0}, fallback="highest_overall")
        )
        run = start_run(new_run(ORIGINAL, cfg), suite)
        step(run, suite)
        finalize(run)
        assert run.final[1] is False
        pairs, summary = build_sft_dataset([run], require_threshold=True)
        assert pairs == []
        assert summary["excluded_threshold"] == 1
        pairs, _ = build_sft_dataset([run], require_threshold=False)
        assert len(pairs) == 1

    def test_unfinalized_run_rejected(self):
        suite = appendix_suite()
        run = start_run(new_run(ORIGINAL, appendix_config()), suite)
        with pytest.raises(ValueError, match="not finalized"):
            build_sft_dataset([run])

    def test_pair_invariants(self):
        with pytest.raises(ValueError):
            SftPair(source="same", target="same", instruction="sft-chat-default",
                    threshold_met=True, run_id="r", target_overall=1.0)
        with pytest.raises(ValueError):
            SftPair(source="a", target="  ", instruction="sft-chat-default",
                    threshold_met=True, run_id="r", target_overall=1.0)


class TestSftEmission:
    def pair(self):
        return SftPair(source=ORIGINAL, target=REFINED1, instruction="sft-chat-default",
                       threshold_met=True, run_id="demo", target_overall=20.81)

    def test_dialog_round_trips_source(self):
        dialog = sft_dialog(self.pair())["dialog"]
        assert [turn["role"] for turn in dialog] == ["user", "assistant"]
        assert parse_sft_user_content(dialog[0]["content"]) == ORIGINAL
        assert dialog[1]["content"] == REFINED1

    def test_golden_line(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        emit_sft_jsonl([self.pair()], out)
        golden = (DATA / "sft_line.golden.jsonl").read_bytes()
        assert out.read_bytes() == golden

    def test_emitted_file_round_trips(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        pairs = [self.pair()]
        emit_sft_jsonl(pairs, out)
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 1
        assert parse_sft_user_content(rows[0]["dialog"][0]["content"]) == ORIGINAL
        assert rows[0]["dialog"][1]["content"] == REFINED1

    def test_empty_pair_list(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        emit_sft_jsonl([], out)
        assert out.read_bytes() == b""
        sidecar = json.loads((tmp_path / "sft.jsonl.meta.json").read_text())
        assert sidecar["count"] == 0

    def test_sidecar_records_trainer_advice(self, tmp_path):
        out = tmp_path / "sft.jsonl"
        emit_sft_jsonl([self.pair()], out, meta={"summary": {"emitted": 1}})
        sidecar = json.loads((tmp_path / "sft.jsonl.meta.json").read_text())
        assert sidecar["trainer"]["epochs"] == 14
        assert sidecar["trainer"]["batch_size"] == 16
        assert sidecar["trainer"]["learning_rate"] == 1e-4
        assert sidecar["summary"] == {"emitted": 1}


class TestPlanDpoIterations:
    def test_two_rounds(self):
        assert plan_dpo_iterations(2) == [
            {"round": 1, "sample_from": "sft"},
            {"round": 2, "sample_from": "dpo-1"},
        ]

    def test_single_round(self):
        assert plan_dpo_iterations(1) == [{"round": 1, "sample_from": "sft"}]

    def test_zero_rounds_rejected(self):
        with pytest.raises(ValueError):
            plan_dpo_iterations(0)


class TestBuildDpoRound:
    def test_chosen_and_rejected_match_bruteforce(self):
        rng = random.Random(5)
        texts = [f"candidate {i}" for i in range(5)]
        rows = {t: {m: round(rng.uniform(0, 5), 3) for m in CORE_METRICS} for t in texts}
        rows["src"] = {m: 1.0 for m in CORE_METRICS}
        sampler = SequencedSampler(texts)
        triplets, summary = build_dpo_round(["src"], sampler, scored_suite(rows), k=5,
                                            margin=0.01)
        assert summary["emitted"] == 1
        sums = {t: sum(rows[t][m] for m in CORE_METRICS) for t in texts}
        best = max(texts, key=lambda t: (sums[t], -texts.index(t)))
        worst = min(texts, key=lambda t: (sums[t], texts.index(t)))
        triplet = triplets[0]
        assert triplet.chosen == best
        assert triplet.rejected == worst
        assert triplet.chosen_overall == pytest.approx(sums[best], abs=1e-12)

    def test_identical_scores_skip_on_margin(self):
        texts = [f"candidate {i}" for i in range(5)]
        rows = {t: {m: 2.0 for m in CORE_METRICS} for t in texts}
        sampler = SequencedSampler(texts)
        triplets, summary = build_dpo_round(["src"], sampler, scored_suite(rows), k=5)
        assert triplets == []
        assert summary["skipped_margin"] == 1

    def test_duplicate_samples_resampled_to_k(self):
        texts = ["dup", "dup", "alpha", "dup", "beta", "gamma", "delta"]
        rng = random.Random(9)
        rows = {t: {m: round(rng.uniform(0, 5), 2) for m in CORE_METRICS}
                for t in set(texts)}
        sampler = SequencedSampler(texts)
        triplets, summary = build_dpo_round(["src"], sampler, scored_suite(rows), k=5,
                                            margin=0.01)
        assert summary["emitted"] == 1
        # 5 distinct candidates were assembled despite duplicates
        assert sampler.calls == 7

    def test_single_distinct_candidate_skipped(self):
        sampler = StaticChatClient("always the same refinement")
        rows = {"always the same refinement": {m: 2.0 for m in CORE_METRICS}}
        triplets, summary = build_dpo_round(["src"], sampler, scored_suite(rows), k=5)
        assert triplets == []
        assert summary["skipped_few_candidates"] == 1

    def test_k_must_be_at_least_two(self):
        with pytest.raises(ValueError):
            build_dpo_round(["src"], StaticChatClient("x"), scored_suite({}), k=1)

    def test_triplet_invariants(self):
        with pytest.raises(ValueError):
            DpoTriplet(prompt="p", chosen="same", rejected="same",
                       chosen_overall=2.0, rejected_overall=1.0, round=1)
        with pytest.raises(ValueError):
            DpoTriplet(prompt="p", chosen="a", rejected="b",
                       chosen_overall=1.0, rejected_overall=2.0, round=1)


class TestDpoEmission:
    def triplets(self):
        rng = random.Random(3)
        texts = [f"candidate {i}" for i in range(4)]
        rows = {t: {m: round(rng.uniform(0, 5), 3) for m in CORE_METRICS} for t in texts}
        sampler = SequencedSampler(texts)
        trips, _ = build_dpo_round(["src one", "src two"], sampler, scored_suite(rows),
                                   k=4, margin=0.01)
        return trips

    def test_line_shape_and_round_trip(self, tmp_path):
        out = tmp_path / "dpo.jsonl"
        trips = self.triplets()
        emit_dpo_jsonl(trips, out)
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == len(trips)
        for row, trip in zip(rows, trips):
            assert list(row) == ["prompt", "chosen", "rejected"]
            assert row["chosen"] == trip.chosen
            assert row["rejected"] == trip.rejected

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        emit_dpo_jsonl(self.triplets(), a)
        emit_dpo_jsonl(self.triplets(), b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.jsonl.meta.json").read_bytes() == \
               (tmp_path / "b.jsonl.meta.json").read_bytes()

    def test_sidecar_sums_are_recomputable(self, tmp_path):
        out = tmp_path / "dpo.jsonl"
        emit_dpo_jsonl(self.triplets(), out)
        sidecar = json.loads((tmp_path / "dpo.jsonl.meta.json").read_text())
        assert sidecar["trainer"]["epochs"] == 3
        for entry in sidecar["triplets"]:
            recomputed = sum(entry["chosen_scores"]["norm"].values())
            assert entry["chosen_overall"] == pytest.approx(recomputed, abs=1e-9)
            assert entry["margin"] > 0
            recomputed = sum(entry["rejected_scores"]["norm"].values())
            assert entry["rejected_overall"] == pytest.approx(recomputed, abs=1e-9)

    def test_empty_triplet_list(self, tmp_path):
        out = tmp_path / "dpo.jsonl"
        emit_dpo_jsonl([], out)
        assert out.read_bytes() == b""
        assert json.loads((tmp_path / "dpo.jsonl.meta.json").read_text())["count"] == 0


class TestNegativePrompts:
    def test_fixed_strategy_returns_exact_constant(self):
        record = make_negative("a calm lake at dawn", "fixed")
        assert record.negative == FIXED_NEGATIVE_PROMPT
        assert record.strategy == "fixed"

    def test_fixed_is_input_independent(self):
        a = make_negative("a calm lake at dawn", "fixed")
        b = make_negative("city traffic at night", "fixed")
        assert a.negative == b.negative

    def test_icl_with_canned_model(self):
        llm = StaticChatClient("blurry frames, low resolution, deformed hands.")
        record = make_negative("a calm lake at dawn", "icl", llm=llm)
        assert record.strategy == "icl"
        assert "blurry frames" in record.negative

    def test_curated_example_pair_is_structurally_valid(self):
        positive, negative = DEFAULT_NEGATIVE_FEW_SHOTS[0]
        validate_negative(positive, negative)  # must not raise
        clause = positive.split(".")[0].split(",")[0].strip().lower()
        assert clause not in negative.lower()

    def test_subject_restating_output_rejected_after_retry(self):
        positive = "A golden retriever sprinting across a meadow. Bright day."
        bad = "blurry, A golden retriever sprinting across a meadow, ugly"
        llm = StaticChatClient(bad)
        with pytest.raises(ValueError, match="restates"):
            make_negative(positive, "icl", llm=llm)
        assert llm.calls == 2  # one retry before surfacing

    def test_comma_less_output_rejected(self):
        llm = StaticChatClient("a single descriptor without commas")
        with pytest.raises(ValueError, match="comma"):
            make_negative("a calm lake at dawn", "icl", llm=llm)

    def test_icl_requires_client(self):
        with pytest.raises(ValueError, match="requires an LLM"):
            make_negative("a calm lake", "icl")

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError, match="strategy"):
            make_negative("a calm lake", "adversarial")

    def test_record_emission_and_pairs(self, tmp_path):
        llm = StaticChatClient("blurry frames, low resolution, deformed hands.")
        records = [make_negative("a calm lake at dawn", "tuned_pair", llm=llm)]
        emit_negative_records_jsonl(records, tmp_path / "neg.jsonl")
        emit_negative_pairs_jsonl(records, tmp_path / "neg.pairs.jsonl")
        row = json.loads((tmp_path / "neg.jsonl").read_text().splitlines()[0])
        assert row["strategy"] == "tuned_pair"
        pair_row = json.loads((tmp_path / "neg.pairs.jsonl").read_text().splitlines()[0])
        assert [t["role"] for t in pair_row["dialog"]] == ["user", "assistant"]
        assert pair_row["dialog"][1]["content"] == records[0].negative
