import json
import os
from pathlib import Path

import pytest

from rebq.cli import main
from rebq.runner import RunConfig

from conftest import TINY, TINY_SYNTH

import dataclasses


def write_config(tmp_path, **overrides) -> Path:
    cfg = RunConfig(
        backbone=TINY,
        backbone_checkpoint=str(tmp_path / "backbone.rbqt"),
        synth=TINY_SYNTH,
        num_classes=4,
        samples_per_class=10,
        num_sessions=2,
        eta=50.0,
        pool_size=4,
        memory_pool_size=4,
        prompt_len=2,
        prompted_layers=2,
        epochs=1,
        batch_size=4,
        lr=3e-3,
        eval_batch_size=16,
        output_dir=str(tmp_path / "out"),
    )
    cfg = dataclasses.replace(cfg, **overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Config plus a pretrained checkpoint shared by the CLI tests."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp)
    rc = main(["pretrain", "--config", str(cfg_path), "--steps", "400",
               "--eval-every", "50", "--samples-per-class", "40"])
    assert rc == 0
    return tmp, cfg_path


class TestPretrainCli:
    def test_checkpoint_written(self, cli_workspace):
        tmp, _ = cli_workspace
        assert (tmp / "backbone.rbqt").exists()


class TestGenData:
    def test_writes_corpus(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        out = tmp / "corpus.jsonl"
        rc = main(["gen-data", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 4 * 10

    def test_corpus_feeds_run(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        corpus = tmp / "corpus2.jsonl"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
        rc = main(["run", "--config", str(cfg_path),
                   "--set", f"corpus_path={corpus}",
                   "--out", str(tmp / "from_corpus")])
        assert rc == 0
        assert (tmp / "from_corpus" / "report.json").exists()


class TestRun:
    def test_run_emits_reports(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        rc = main(["run", "--config", str(cfg_path), "--out", str(tmp / "run1")])
        assert rc == 0
        for name in ("report.json", "matrix.csv", "trajectory.csv"):
            assert (tmp / "run1" / name).exists()
        report = json.loads((tmp / "run1" / "report.json").read_text())
        assert report["config"]["variant"] == "canonical"
        assert 0.0 <= report["ap"] <= 1.0

    def test_missing_checkpoint_exit_code(self, tmp_path):
        cfg_path = write_config(tmp_path,
                                backbone_checkpoint=str(tmp_path / "nope.rbqt"))
        rc = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_variant_flag_override(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        rc = main(["run", "--config", str(cfg_path), "--variant", "baseline",
                   "--out", str(tmp / "run_baseline")])
        assert rc == 0
        report = json.loads((tmp / "run_baseline" / "report.json").read_text())
        assert report["config"]["variant"] == "baseline"

    def test_unknown_set_key_rejected(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        rc = main(["run", "--config", str(cfg_path), "--set", "bogus_key=1",
                   "--out", str(tmp / "x")])
        assert rc == 2

    def test_output_root_env(self, cli_workspace, monkeypatch):
        tmp, cfg_path = cli_workspace
        root = tmp / "env_root"
        monkeypatch.setenv("REBQ_OUTPUT_ROOT", str(root))
        rc = main(["run", "--config", str(cfg_path), "--out", "nested/run"])
        assert rc == 0
        assert (root / "nested" / "run" / "report.json").exists()

    def test_flag_beats_env(self, cli_workspace, monkeypatch):
        tmp, cfg_path = cli_workspace
        monkeypatch.setenv("REBQ_OUTPUT_ROOT", str(tmp / "ignored"))
        absolute = tmp / "absolute_out"
        rc = main(["run", "--config", str(cfg_path), "--out", str(absolute)])
        assert rc == 0
        assert (absolute / "report.json").exists()
        assert not (tmp / "ignored").exists()

    def test_root_seed_derives_streams(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        for i, run_dir in enumerate(("seeded_a", "seeded_b")):
            rc = main(["run", "--config", str(cfg_path), "--seed", "777",
                       "--out", str(tmp / run_dir)])
            assert rc == 0
        a = json.loads((tmp / "seeded_a" / "report.json").read_text())
        b = json.loads((tmp / "seeded_b" / "report.json").read_text())
        assert a["config"]["seed_corpus"] == b["config"]["seed_corpus"]
        assert a["matrix"] == b["matrix"]


class TestSweep:
    def test_grid_and_summary(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        rc = main(["sweep", "--config", str(cfg_path), "--axis", "eta=0,50",
                   "--out", str(tmp / "sweep")])
        assert rc == 0
        summary = (tmp / "sweep" / "sweep.csv").read_text().splitlines()
        assert summary[0] == "tag,ap,fg,output_dir"
        assert len(summary) == 3
        assert (tmp / "sweep" / "eta0" / "report.json").exists()
        assert (tmp / "sweep" / "eta50" / "report.json").exists()

    def test_unknown_axis_rejected(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        rc = main(["sweep", "--config", str(cfg_path), "--axis", "bogus=1",
                   "--out", str(tmp / "sweep2")])
        assert rc == 2


class TestReport:
    def test_verify_round_trip(self, cli_workspace, capsys):
        tmp, cfg_path = cli_workspace
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp / "rep")]) == 0
        rc = main(["report", "--report", str(tmp / "rep" / "report.json")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "consistent" in out

    def test_tampered_report_flagged(self, cli_workspace):
        tmp, cfg_path = cli_workspace
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp / "tamper")]) == 0
        path = tmp / "tamper" / "report.json"
        doc = json.loads(path.read_text())
        doc["ap"] = 0.123456
        path.write_text(json.dumps(doc))
        assert main(["report", "--report", str(path)]) == 1
