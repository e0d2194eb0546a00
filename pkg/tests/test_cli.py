import json
import os
from pathlib import Path

import pytest

import guidelab.cli as cli
from guidelab.config import OUTPUT_ENV_VAR, load_config
from guidelab.errors import ConfigError
from guidelab.storage import read_jsonl

CONFIG_TEMPLATE = """\
[fixture]
v = 4
k = 1
l_max = 5
seed = 11
eos_floor = 0.2
conditions = ["x0"]

[fixture.keywords]
x0 = [["t0"]]

[train]
lam = 1.0
lr = 0.3
epochs = 25
samples_per_x = 80
seed = 7
context_window = 5
hidden = [12]

[decode]
strategy = "sample"
n_per_x = 20
seed = 3

[evaluate]
bleu_max_n = 3
n_references = 8

[verify]
n_fixtures = 2
n_perturbations = 2
n_tower = 2

[output]
dir = "{out}"
"""


@pytest.fixture
def run_config(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(CONFIG_TEMPLATE.format(out=out))
    return cfg_path, out


def run(command, cfg_path):
    return cli.main([command, "-c", str(cfg_path)])


class TestConfig:
    def test_unknown_key_rejected_with_field_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[train]\nbogus = 1\n")
        with pytest.raises(ConfigError, match="train.bogus"):
            load_config(path)

    def test_type_error_names_field(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[decode]\ntop_p = 1.4\n")
        with pytest.raises(ConfigError, match="decode.top_p"):
            load_config(path)

    def test_cli_exit_code_two_on_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[train]\nlr = -1.0\n")
        assert cli.main(["train", "-c", str(path)]) == 2
        assert "train" in capsys.readouterr().err

    def test_env_var_overrides_output_dir(self, tmp_path, monkeypatch, run_config):
        cfg_path, _ = run_config
        override = tmp_path / "elsewhere"
        monkeypatch.setenv(OUTPUT_ENV_VAR, str(override))
        cfg = load_config(cfg_path)
        assert cfg.out_dir == override


class TestPipeline:
    def test_gen_fixture_deterministic(self, run_config):
        cfg_path, out = run_config
        assert run("gen-fixture", cfg_path) == 0
        first = (out / "model.json").read_bytes()
        assert run("gen-fixture", cfg_path) == 0
        assert (out / "model.json").read_bytes() == first

    def test_full_pipeline_and_rerun_determinism(self, run_config):
        cfg_path, out = run_config
        for command in ("gen-fixture", "train", "decode", "evaluate", "report"):
            assert run(command, cfg_path) == 0, command
        for name in ("model.json", "oracle.json", "ratenet.json", "train_log.jsonl",
                     "decodes.jsonl", "eval_report.json", "report.csv",
                     "training_loss.png", "consistency_residual.png",
                     "eval_summary.png", "manifest.json"):
            assert (out / name).exists(), name

        report = json.loads((out / "eval_report.json").read_text())
        assert 0.0 <= report["coverage"] <= 1.0
        assert report["sample_size"] == 20
        assert set(report["bleu"]) == {"1", "2", "3"}

        payloads = {name: (out / name).read_bytes()
                    for name in ("model.json", "ratenet.json", "decodes.jsonl",
                                 "eval_report.json", "train_log.jsonl")}
        for command in ("gen-fixture", "train", "decode", "evaluate"):
            assert run(command, cfg_path) == 0
        for name, blob in payloads.items():
            assert (out / name).read_bytes() == blob, f"{name} changed across reruns"

        manifest = json.loads((out / "manifest.json").read_text())
        for entry in manifest["entries"].values():
            for artifact in entry["artifacts"]:
                assert (out / artifact).exists()

    def test_decode_records_are_valid_jsonl(self, run_config):
        cfg_path, out = run_config
        for command in ("gen-fixture", "train", "decode"):
            assert run(command, cfg_path) == 0
        records = read_jsonl(out / "decodes.jsonl")
        assert len(records) == 20
        assert all({"x", "tokens", "text", "oracle_bit",
                    "logprob_base", "logprob_guided"} <= set(r) for r in records)

    def test_exact_rate_decode_needs_no_net(self, tmp_path):
        out = tmp_path / "run"
        cfg_path = tmp_path / "run.toml"
        text = CONFIG_TEMPLATE.format(out=out).replace(
            'strategy = "sample"', 'strategy = "sample"\nrate = "exact"')
        cfg_path.write_text(text)
        assert run("gen-fixture", cfg_path) == 0
        assert run("decode", cfg_path) == 0
        records = read_jsonl(out / "decodes.jsonl")
        assert all(r["oracle_bit"] == 1 for r in records)

    def test_verify_exits_zero_and_writes_report(self, run_config):
        cfg_path, out = run_config
        assert run("verify", cfg_path) == 0
        report = json.loads((out / "verify_report.json").read_text())
        assert report["passed"] is True
        assert len(report["checks"]) >= 10

    def test_verify_exit_one_on_failure(self, run_config, monkeypatch):
        from guidelab.verify import CheckResult, VerifyReport

        cfg_path, _ = run_config
        broken = VerifyReport(checks=[CheckResult("demo", False, 1.0, "forced failure")])
        monkeypatch.setattr(cli, "run_verification", lambda **kw: broken)
        assert run("verify", cfg_path) == 1

    def test_failed_command_quarantines_partial_artifacts(self, run_config, monkeypatch):
        cfg_path, out = run_config
        assert run("gen-fixture", cfg_path) == 0

        def boom(self, path):
            raise RuntimeError("disk full")

        monkeypatch.setattr(cli.RateNet, "save", boom)
        with pytest.raises(RuntimeError):
            run("train", cfg_path)
        assert not (out / "ratenet.json").exists()
        quarantined = list((out / "failed").glob("train-*/train_log.jsonl"))
        assert quarantined, "partial training log should be moved under failed/"

    def test_report_without_artifacts_fails_loudly(self, run_config):
        cfg_path, _ = run_config
        with pytest.raises(Exception):
            run("report", cfg_path)
