import json
import math
from pathlib import Path

import pytest

from promptevo.cli import main
from promptevo.templates import FIXED_NEGATIVE_PROMPT, parse_sft_user_content

PROMPTS = [
    "a cat plays piano",
    "waves crash on rocks at sunset",
    "a chef cooks pasta in a busy kitchen",
]


def write_prompts(tmp_path, prompts=PROMPTS, name="prompts.txt"):
    path = tmp_path / name
    path.write_text("".join(p + "\n" for p in prompts), encoding="utf-8")
    return path


def write_config(tmp_path, overrides=None, name="config.json"):
    data = {"paths": {"cache_dir": str(tmp_path / "cache")}}
    if overrides:
        data.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestEvolveCommand:
    def test_batch_finalizes_every_prompt(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("evolve", "--config", config, "--prompts", prompts, "--out", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["runs"]) == 3
        assert all(e["status"] == "finalized" for e in manifest["runs"].values())
        assert manifest["totals"]["backend_calls"] > 0
        for rid in manifest["runs"]:
            run_dir = out / "runs" / rid
            assert (run_dir / "final.json").exists()
            evaluated = sum(
                1 for f in (run_dir / "iterations").glob("*.jsonl")
                for line in f.read_text().splitlines() if line.strip()
            )
            assert evaluated <= 13  # 1 original + 4 iterations x 3 offspring

    def test_resume_makes_zero_backend_calls(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("evolve", "--config", config, "--prompts", prompts, "--out", out) == 0
        assert run_cli("evolve", "--config", config, "--prompts", prompts,
                       "--out", out, "--resume") == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["totals"]["backend_calls"] == 0
        assert manifest["totals"]["skipped"] == 3

    def test_resume_refuses_config_drift(self, tmp_path):
        prompts = write_prompts(tmp_path)
        out = tmp_path / "out"
        config_a = write_config(tmp_path, name="a.json")
        assert run_cli("evolve", "--config", config_a, "--prompts", prompts, "--out", out) == 0
        config_b = write_config(tmp_path, overrides={"seed": 99}, name="b.json")
        assert run_cli("evolve", "--config", config_b, "--prompts", prompts,
                       "--out", out, "--resume") == 2

    def test_equal_seeds_give_byte_identical_run_dirs(self, tmp_path):
        prompts = write_prompts(tmp_path)
        trees = []
        for name in ("first", "second"):
            (tmp_path / name).mkdir(exist_ok=True)
            config = write_config(tmp_path / name, name=f"{name}.json")
            out = tmp_path / name / "out"
            assert run_cli("evolve", "--config", config, "--prompts", prompts,
                           "--out", out) == 0
            tree = {
                str(p.relative_to(out)): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.is_file()
            }
            trees.append(tree)
        assert trees[0].keys() == trees[1].keys()
        for key in trees[0]:
            assert trees[0][key] == trees[1][key], key

    def test_invalid_config_is_exit_2(self, tmp_path):
        prompts = write_prompts(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert run_cli("evolve", "--config", bad, "--prompts", prompts,
                       "--out", tmp_path / "out") == 2

    def test_unknown_config_key_is_exit_2(self, tmp_path):
        prompts = write_prompts(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sede": 1}), encoding="utf-8")
        assert run_cli("evolve", "--config", bad, "--prompts", prompts,
                       "--out", tmp_path / "out") == 2

    def test_missing_prompts_is_exit_3(self, tmp_path):
        config = write_config(tmp_path)
        assert run_cli("evolve", "--config", config, "--prompts", tmp_path / "nope.txt",
                       "--out", tmp_path / "out") == 3


class TestDatasetCommands:
    @pytest.fixture()
    def evolved(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("evolve", "--config", config, "--prompts", prompts, "--out", out) == 0
        return tmp_path, config, prompts, out

    def test_build_sft(self, evolved):
        tmp_path, config, prompts, out = evolved
        sft = tmp_path / "sft.jsonl"
        assert run_cli("build-sft", "--runs", out, "--out", sft) == 0
        rows = [json.loads(line) for line in sft.read_text().splitlines()]
        assert 0 < len(rows) <= 3
        for row in rows:
            source = parse_sft_user_content(row["dialog"][0]["content"])
            assert source in PROMPTS
            assert row["dialog"][1]["content"] != source
        meta = json.loads((tmp_path / "sft.jsonl.meta.json").read_text())
        assert meta["count"] == len(rows)

    def test_build_sft_requires_finalized_runs(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "manifest.json").write_text(json.dumps(
            {"config_hash": "h", "runs": {"run-x": {"prompt": "p", "status": "failed"}}}
        ))
        assert run_cli("build-sft", "--runs", out, "--out", tmp_path / "sft.jsonl") == 3

    def test_build_dpo_round_one(self, evolved):
        tmp_path, config, prompts, out = evolved
        dpo = tmp_path / "dpo.jsonl"
        assert run_cli("build-dpo", "--config", config, "--sources", prompts,
                       "--round", 1, "--out", dpo) == 0
        rows = [json.loads(line) for line in dpo.read_text().splitlines()]
        assert 0 < len(rows) <= 3
        meta = json.loads((tmp_path / "dpo.jsonl.meta.json").read_text())
        assert meta["summary"]["sample_from"] == "sft"
        assert meta["summary"]["emitted"] == len(rows)

    def test_build_dpo_round_two_samples_from_dpo_1(self, evolved):
        tmp_path, config, prompts, out = evolved
        dpo = tmp_path / "dpo2.jsonl"
        assert run_cli("build-dpo", "--config", config, "--sources", prompts,
                       "--round", 2, "--out", dpo) == 0
        meta = json.loads((tmp_path / "dpo2.jsonl.meta.json").read_text())
        assert meta["summary"]["sample_from"] == "dpo-1"

    def test_build_dpo_rejects_out_of_plan_round(self, evolved):
        tmp_path, config, prompts, out = evolved
        assert run_cli("build-dpo", "--config", config, "--sources", prompts,
                       "--round", 3, "--out", tmp_path / "dpo3.jsonl") == 3

    def test_build_dpo_deterministic_files(self, evolved):
        tmp_path, config, prompts, out = evolved
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run_cli("build-dpo", "--config", config, "--sources", prompts,
                       "--round", 1, "--out", a) == 0
        assert run_cli("build-dpo", "--config", config, "--sources", prompts,
                       "--round", 1, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()


class TestReportCommand:
    def test_report_csv_on_stdout_and_disk(self, tmp_path, capsys):
        prompts = write_prompts(tmp_path, prompts=["a cat plays piano"])
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("evolve", "--config", config, "--prompts", prompts, "--out", out) == 0
        run_dir = next((out / "runs").iterdir())
        capsys.readouterr()
        assert run_cli("report", "--run", run_dir) == 0
        stdout = capsys.readouterr().out
        assert stdout.splitlines()[0] == "iteration,metric,mean"
        assert (run_dir / "report.csv").read_text() == stdout

    def test_missing_run_dir_is_exit_3(self, tmp_path):
        assert run_cli("report", "--run", tmp_path / "nope") == 3


class TestDpoLossCommand:
    def test_zero_margin_fixtures_mean_ln2(self, tmp_path, capsys):
        fixtures = tmp_path / "lp.jsonl"
        rows = [{"prompt": f"p{i}", "chosen_lp": -1.0, "rejected_lp": -2.0,
                 "ref_chosen_lp": -1.0, "ref_rejected_lp": -2.0} for i in range(4)]
        fixtures.write_text("".join(json.dumps(r) + "\n" for r in rows))
        assert run_cli("dpo-loss", "--fixtures", fixtures, "--beta", 0.1) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["mean_loss"] == pytest.approx(math.log(2), abs=1e-12)
        assert summary["beta"] == 0.1
        on_disk = json.loads(Path(f"{fixtures}.summary.json").read_text())
        assert on_disk == summary

    def test_empty_fixtures_is_exit_3(self, tmp_path):
        fixtures = tmp_path / "lp.jsonl"
        fixtures.write_text("")
        assert run_cli("dpo-loss", "--fixtures", fixtures) == 3


class TestMakeNegativesCommand:
    def test_fixed_strategy(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "neg.jsonl"
        assert run_cli("make-negatives", "--config", config, "--prompts", prompts,
                       "--strategy", "fixed", "--out", out) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 3
        assert all(r["negative"] == FIXED_NEGATIVE_PROMPT for r in rows)

    def test_icl_strategy_with_mock(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "neg.jsonl"
        assert run_cli("make-negatives", "--config", config, "--prompts", prompts,
                       "--strategy", "icl", "--out", out) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 3
        assert all("," in r["negative"] for r in rows)

    def test_tuned_pair_emits_pairs_file(self, tmp_path):
        prompts = write_prompts(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "neg.jsonl"
        assert run_cli("make-negatives", "--config", config, "--prompts", prompts,
                       "--strategy", "tuned_pair", "--out", out) == 0
        pairs = [json.loads(line) for line in Path(f"{out}.pairs.jsonl").read_text().splitlines()]
        assert len(pairs) == 3
        assert all(p["dialog"][0]["role"] == "user" for p in pairs)
