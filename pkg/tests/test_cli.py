import csv
import json
import subprocess
import sys

import pytest
import yaml

from hybrid_rl import cli
from hybrid_rl.trainer import METRIC_COLUMNS, Trainer

SMALL = {
    "stages": ["mpo", "grpo"], "train_pool": 128, "eval_tasks": 48, "log_every": 3,
    "base": {"steps": 150},
    "mpo": {"rounds": 2, "steps_per_round": 2, "tasks_per_round": 16},
    "grpo": {"iterations": 6, "groups_per_step": 4},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _flat(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def test_run_writes_all_outputs(tmp_path, config):
    out = tmp_path / "run"
    assert _run("run", "--config", config, "--out", out) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) > 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["code_version"].startswith("0.1.0+")
    assert manifest["config"]["stages"] == ["mpo", "grpo"]
    assert {p.name for p in (out / "checkpoints").iterdir()} == {"mpo.ckpt", "grpo.ckpt", "final.ckpt"}
    assert (out / "timing.csv").read_text().startswith("step,stage,wall_clock")


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    assert _run("run", "--config", missing) == 1
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_names_the_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("grpo:\n  clip:\n    epsilon: 3\n")
    assert _run("run", "--config", bad, "--out", tmp_path / "o") == 1
    assert "grpo.clip.epsilon" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert _run("frobnicate") == 1
    assert _run("run") == 1
    assert _run("run", "--config", "x.yaml", "--ssb", "maybe") == 1


def test_same_seed_gives_identical_metrics(tmp_path, config):
    for name in ("a", "b"):
        assert _run("run", "--config", config, "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_stage_and_ssb_flags_flip_one_field(tmp_path, config):
    _run("run", "--config", config, "--override", "grpo.iterations=1", "mpo.rounds=1", "--out", tmp_path / "a")
    _run("run", "--config", config, "--override", "grpo.iterations=1", "mpo.rounds=1", "--stage", "mpo", "grpo",
         "--ssb", "off", "--out", tmp_path / "b")
    a, b = (_flat(json.loads((tmp_path / n / "manifest.json").read_text())) for n in "ab")
    assert {k for k in a if a[k] != b[k]} == {"config.grpo.buffer.enabled"}


def test_manifest_reproduces_run(tmp_path, config):
    assert _run("run", "--config", config, "--seed", 3, "--out", tmp_path / "a") == 0
    assert _run("run", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_runtime_failure_leaves_partial_outputs(tmp_path, config, monkeypatch):
    def boom(self, params, tasks, buffer=None):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(Trainer, "run_grpo_stage", boom)
    out = tmp_path / "f"
    assert _run("run", "--config", config, "--out", out) == 2
    failure = json.loads((out / "failure.json").read_text())
    assert failure["error"] == "FloatingPointError" and failure["last_stage"] == "mpo"
    assert (out / "checkpoints" / "mpo.ckpt").exists()
    assert len((out / "metrics.csv").read_text().splitlines()) > 1


def test_report_single_file(tmp_path, config, capsys):
    _run("run", "--config", config, "--out", tmp_path / "r")
    capsys.readouterr()
    assert _run("report", tmp_path / "r" / "metrics.csv", "--out", tmp_path / "rep") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].startswith("run")
    with open(tmp_path / "rep" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1
    series = tmp_path / "rep" / "r__eval_accuracy.csv"
    assert series.read_text().startswith("step,value\n")


def test_report_pairs_ssb_runs(tmp_path, config, capsys):
    _run("run", "--config", config, "--ssb", "on", "--out", tmp_path / "on")
    _run("run", "--config", config, "--ssb", "off", "--out", tmp_path / "off")
    capsys.readouterr()
    assert _run("report", tmp_path / "on" / "metrics.csv", tmp_path / "off" / "metrics.csv") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and lines[3].startswith("delta(on - off)")


def test_report_empty_and_mismatched_files(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(METRIC_COLUMNS) + "\n")
    assert _run("report", empty) == 1
    assert "no records" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("step,accuracy\n1,0.5\n")
    assert _run("report", bad) != 0
    assert "schema" in capsys.readouterr().err
    ragged = tmp_path / "ragged.csv"
    ragged.write_text(",".join(METRIC_COLUMNS) + "\n1,grpo\n")
    assert _run("report", ragged) != 0
    assert _run("report", tmp_path / "nowhere.csv") == 1


def test_ablate_writes_one_directory_per_cell(tmp_path, config, capsys):
    assert _run("ablate", "--config", config, "--matrix", "ssb", "--seeds", 0, "--out", tmp_path / "abl",
                "--override", "grpo.iterations=2", "mpo.rounds=1") == 0
    cells = sorted(p.name for p in (tmp_path / "abl").iterdir())
    assert cells == ["ssb_off__seed0", "ssb_on__seed0"]
    files = [tmp_path / "abl" / c / "metrics.csv" for c in cells]
    assert _run("report", *files) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybrid_rl", "report", str(tmp_path / "none.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "not found" in proc.stderr
