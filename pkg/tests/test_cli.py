import json
import subprocess
import sys
from pathlib import Path

import pytest

from trqam import numerics as nx
from trqam.cli import load_checkpoint, main

GOLDEN = Path(__file__).parent / "golden"

SMALL = """
env: {env}
seed: 1
dataset_size: 300
hidden: [16, 16]
critic_hidden: [16, 16]
bc_steps: 30
offline_steps: {offline}
online_steps: {online}
eval_interval: 5
eval_episodes: 10
"""


def _config(tmp_path, env="bandit", offline=10, online=5, extra=""):
    path = tmp_path / "cfg.yaml"
    path.write_text(SMALL.format(env=env, offline=offline, online=online) + extra)
    return str(path)


def _run(*args):
    return main([str(a) for a in args])


def _pipeline(cfg, out):
    for cmd in ("gen-data", "pretrain", "train"):
        assert _run(cmd, "--config", cfg, "--out", out) == 0


@pytest.mark.parametrize("env", ["bandit", "pointmass2d"])
def test_full_pipeline(tmp_path, env, capsys):
    cfg = _config(tmp_path, env)
    out = tmp_path / "run"
    _pipeline(cfg, out)
    assert _run("eval", "--config", cfg, "--out", out) == 0
    for name in ("dataset.trqd", "dataset.csv", "base.trqp", "base.json", "finetuned.trqp", "finetuned.json",
                 "bc_metrics.jsonl", "metrics.jsonl", "eval.jsonl", "eval_report.json"):
        assert (out / name).exists(), name
    metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == list(range(15))
    evals = [json.loads(line) for line in (out / "eval.jsonl").read_text().splitlines()]
    assert [e["step"] for e in evals] == [5, 10, 15]
    manifest = json.loads((out / "finetuned.json").read_text())
    assert manifest["format"] == "trqam-checkpoint" and manifest["activation"] == "gelu"
    report = json.loads((out / "eval_report.json").read_text())
    assert 0.0 <= report["success_rate"] <= 1.0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(last)["command"] == "eval"


def test_train_zero_steps_keeps_checkpoint(tmp_path):
    cfg = _config(tmp_path, offline=0, online=0)
    out = tmp_path / "run"
    _pipeline(cfg, out)
    assert (out / "finetuned.trqp").read_bytes() == (out / "base.trqp").read_bytes()


def test_base_checkpoint_untouched_by_training(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    for cmd in ("gen-data", "pretrain"):
        assert _run(cmd, "--config", cfg, "--out", out) == 0
    before = (out / "base.trqp").read_bytes()
    assert _run("train", "--config", cfg, "--out", out) == 0
    assert (out / "base.trqp").read_bytes() == before


def test_runs_are_bit_reproducible(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(cfg, a)
    _pipeline(cfg, b)
    for name in ("dataset.trqd", "base.trqp", "bc_metrics.jsonl", "metrics.jsonl", "eval.jsonl", "finetuned.trqp"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_flag_overrides_config(tmp_path):
    cfg = _config(tmp_path)
    _run("gen-data", "--config", cfg, "--out", tmp_path / "a")
    _run("gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", 9)
    assert (tmp_path / "a" / "dataset.trqd").read_bytes() != (tmp_path / "b" / "dataset.trqd").read_bytes()


def test_eval_golden_checkpoint(tmp_path):
    expected = json.loads((GOLDEN / "eval_report.json").read_text())
    assert _run("eval", "--config", GOLDEN / "eval_config.yaml", "--out", tmp_path, "--checkpoint",
                GOLDEN / "eval_checkpoint.trqp") == 0
    got = json.loads((tmp_path / "eval_report.json").read_text())
    assert got["success_rate"] == expected["success_rate"]
    assert got["mean_return"] == expected["mean_return"]


def test_verify_passes(tmp_path, capsys):
    assert _run("verify", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["passed"] and len(report["checks"]) == 4


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_dataset_is_reported(tmp_path, capsys):
    assert _run("pretrain", "--out", tmp_path) == 2
    assert _error(capsys)["error"] == "FileNotFoundError"


def test_corrupt_checkpoint_is_reported(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    for cmd in ("gen-data", "pretrain"):
        _run(cmd, "--config", cfg, "--out", out)
    blob = bytearray((out / "base.trqp").read_bytes())
    blob[:4] = b"NOPE"
    (out / "base.trqp").write_bytes(bytes(blob))
    assert _run("train", "--config", cfg, "--out", out) == 2
    assert _error(capsys)["error"] == "FormatError"


def test_missing_manifest_is_reported(tmp_path, capsys):
    p = nx.mlp_init([3, 4, 1], seed=0)
    nx.save_params(tmp_path / "x.trqp", p)
    with pytest.raises(Exception, match="manifest"):
        load_checkpoint(tmp_path / "x.trqp")
    assert _run("eval", "--out", tmp_path, "--checkpoint", tmp_path / "x.trqp") == 2
    assert _error(capsys)["error"] == "FormatError"


def test_invalid_config_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("eps_kl: -1\n")
    assert _run("verify", "--config", path, "--out", tmp_path) == 2
    err = _error(capsys)
    assert err["error"] == "ConfigError" and "must be positive" in err["message"]


def test_bad_log_level(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TRQAM_LOG_LEVEL", "chatty")
    assert _run("verify", "--out", tmp_path) == 2
    assert _error(capsys)["error"] == "ConfigError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "trqam", "verify", "--out", str(tmp_path)], capture_output=True,
                          text=True, env={"TRQAM_LOG_LEVEL": "info", "PATH": "/usr/bin:/bin"})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["passed"]
    assert "config" in proc.stderr


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2
