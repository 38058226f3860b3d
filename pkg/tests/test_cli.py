"""End-to-end CLI tests using click's runner."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from popcontrast.cli import main

SMOKE_CONFIG = {
    "synth": {
        "n_animals": 2, "groups_per_animal": 1, "neurons_per_group": 6,
        "n_cell_types": 2, "n_regions": 2, "duration_s": 40.0, "seed": 1,
    },
    "sampler": {"t_ctx_s": 10.0, "delta_t_max_s": 10.0, "seed": 3},
    "encoder": {"d": 16, "heads": 2, "l_t": 1, "l_st": 1},
    "trainer": {"total_steps": 2, "batch_size": 2, "seed": 7},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synth+pretrain+embed pipeline shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(SMOKE_CONFIG))
    split = {
        "setting": "transductive_zero_shot",
        "pretrain_sessions": ["synth_000", "synth_001"],
        "train_sessions": ["synth_000"],
        "test_sessions": ["synth_001"],
    }
    (root / "split.json").write_text(json.dumps(split))
    runner = CliRunner()
    for args in (
        ["synth", "--config", str(root / "cfg.json"), "--out", str(root / "data")],
        ["pretrain", "--config", str(root / "cfg.json"),
         "--data", str(root / "data"), "--out", str(root / "run")],
        ["embed", "--checkpoint", str(root / "run" / "ckpt_final.bin"),
         "--data", str(root / "data"), "--out", str(root / "emb.json")],
    ):
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
    return root


def test_synth_writes_dataset_and_echo(workdir):
    assert (workdir / "data" / "manifest.json").exists()
    echo = json.loads((workdir / "data" / "run.json").read_text())
    assert echo["command"] == "synth"
    assert echo["config"]["synth"]["n_animals"] == 2
    assert "tool_version" in echo["config"]


def test_pretrain_outputs(workdir):
    assert (workdir / "run" / "ckpt_final.bin").exists()
    assert (workdir / "run" / "metrics.jsonl").exists()
    echo = json.loads((workdir / "run" / "run.json").read_text())
    assert echo["config"]["trainer"]["total_steps"] == 2


def test_embed_output_schema(workdir):
    payload = json.loads((workdir / "emb.json").read_text())
    assert payload["pretrain_sessions"] == ["synth_000", "synth_001"]
    assert len(payload["embeddings"]) == 12
    row = payload["embeddings"][0]
    assert len(row["vector"]) == 16
    assert set(row) >= {"neuron_id", "session_id", "subject_id", "group_id"}


def test_probe_end_to_end(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "report.json"
    result = runner.invoke(main, [
        "probe", "--embeddings", str(workdir / "emb.json"),
        "--data", str(workdir / "data"), "--split", str(workdir / "split.json"),
        "--task", "cell_type", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert 0.0 <= report["macro_f1"] <= 1.0
    assert report["setting"] == "transductive_zero_shot"


def test_probe_leakage_is_validation_error(workdir, tmp_path):
    bad_split = {
        "setting": "inductive_zero_shot",
        "pretrain_sessions": ["synth_000", "synth_001"],
        "train_sessions": ["synth_000"],
        "test_sessions": ["synth_001"],  # pretrained on -> leakage
    }
    split_path = tmp_path / "bad_split.json"
    split_path.write_text(json.dumps(bad_split))
    runner = CliRunner()
    result = runner.invoke(main, [
        "probe", "--embeddings", str(workdir / "emb.json"),
        "--data", str(workdir / "data"), "--split", str(split_path),
        "--task", "cell_type", "--out", str(tmp_path / "r.json"),
    ])
    assert result.exit_code == 1
    assert "error_code: SplitLeakage" in result.output


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"trainer": {"bogus_key": 1}}))
    runner = CliRunner()
    result = runner.invoke(main, ["synth", "--config", str(cfg),
                                  "--out", str(tmp_path / "x")])
    assert result.exit_code == 1
    assert "error_code: ConfigError" in result.output


def test_missing_checkpoint_is_runtime_error(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "embed", "--checkpoint", str(tmp_path / "none.bin"),
        "--data", str(tmp_path), "--out", str(tmp_path / "e.json"),
    ])
    assert result.exit_code == 2


def test_pretrain_zero_steps_checkpoint_usable(workdir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "pretrain", "--config", str(workdir / "cfg.json"),
        "--data", str(workdir / "data"), "--out", str(tmp_path / "r0"),
        "--steps", "0",
    ])
    assert result.exit_code == 0, result.output
    result = runner.invoke(main, [
        "embed", "--checkpoint", str(tmp_path / "r0" / "ckpt_final.bin"),
        "--data", str(workdir / "data"), "--out", str(tmp_path / "emb0.json"),
    ])
    assert result.exit_code == 0, result.output


def test_env_seed_fallback(workdir, tmp_path, monkeypatch):
    cfg = {k: dict(v) for k, v in SMOKE_CONFIG.items()}
    del cfg["trainer"]["seed"]
    del cfg["sampler"]["seed"]
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    monkeypatch.setenv("NUCLR_SEED", "42")
    runner = CliRunner()
    result = runner.invoke(main, [
        "pretrain", "--config", str(cfg_path),
        "--data", str(workdir / "data"), "--out", str(tmp_path / "r")])
    assert result.exit_code == 0, result.output
    echo = json.loads((tmp_path / "r" / "run.json").read_text())
    assert echo["config"]["trainer"]["seed"] == 42
    assert echo["config"]["sampler"]["seed"] == 42


def test_flag_overrides_file(workdir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "pretrain", "--config", str(workdir / "cfg.json"),
        "--data", str(workdir / "data"), "--out", str(tmp_path / "r"),
        "--steps", "1", "--seed", "99",
    ])
    assert result.exit_code == 0, result.output
    echo = json.loads((tmp_path / "r" / "run.json").read_text())
    assert echo["config"]["trainer"]["total_steps"] == 1
    assert echo["config"]["trainer"]["seed"] == 99


def test_identical_runs_identical_outputs(workdir, tmp_path):
    runner = CliRunner()
    for name in ("a", "b"):
        result = runner.invoke(main, [
            "pretrain", "--config", str(workdir / "cfg.json"),
            "--data", str(workdir / "data"), "--out", str(tmp_path / name),
            "--threads", "1",
        ])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a" / "ckpt_final.bin").read_bytes() == (
        tmp_path / "b" / "ckpt_final.bin"
    ).read_bytes()


def test_sweep_binsize_reports(workdir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "sweep-binsize", "--config", str(workdir / "cfg.json"),
        "--data", str(workdir / "data"), "--split", str(workdir / "split.json"),
        "--task", "cell_type", "--bins", "0.02,0.05",
        "--out", str(tmp_path / "sweep"),
    ])
    assert result.exit_code == 0, result.output
    for b in ("0.020000", "0.050000"):
        assert (tmp_path / "sweep" / f"report_bin_{b}.json").exists()
    # second invocation reuses the cached checkpoints
    again = runner.invoke(main, [
        "sweep-binsize", "--config", str(workdir / "cfg.json"),
        "--data", str(workdir / "data"), "--split", str(workdir / "split.json"),
        "--task", "cell_type", "--bins", "0.02,0.05",
        "--out", str(tmp_path / "sweep"),
    ])
    assert again.exit_code == 0, again.output


def test_ablate_reports(workdir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "ablate", "--config", str(workdir / "cfg.json"),
        "--data", str(workdir / "data"), "--split", str(workdir / "split.json"),
        "--task", "cell_type", "--out", str(tmp_path / "abl"),
    ])
    assert result.exit_code == 0, result.output
    for variant in ("full", "no_spatial"):
        report = json.loads((tmp_path / "abl" / f"report_{variant}.json").read_text())
        assert report["config_echo"]["variant"] == variant
