"""CLI pipeline: subcommands, exit codes, hash guards, artifacts."""

import json
import os

import pytest
import yaml
from click.testing import CliRunner

from cvdistill import experiment as ex
from cvdistill.cli import main

CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "tiny.yaml")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny world + teacher shared by the module's tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["gen-world", "--config", CONFIG, "--out", str(root / "world")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["train-teacher", "--config", CONFIG, "--world", str(root / "world"),
                             "--out", str(root / "teacher.npz")])
    assert r.exit_code == 0, r.output
    return root


def test_help_and_unknown_subcommand():
    runner = CliRunner()
    assert runner.invoke(main, ["--help"]).exit_code == 0
    assert runner.invoke(main, ["no-such-command"]).exit_code == 2


def test_gen_world_writes_manifest(workdir):
    manifest = json.loads((workdir / "world" / "manifest.json").read_text())
    assert "world_config_hash" in manifest
    assert manifest["splits"]["adapt"]["gt_hidden"] is True


def test_missing_config_file():
    runner = CliRunner()
    r = runner.invoke(main, ["gen-world", "--config", "/nonexistent.yaml"])
    assert r.exit_code == ex.EXIT_MISSING_INPUT


def test_missing_world_dir():
    runner = CliRunner()
    r = runner.invoke(main, ["train-teacher", "--config", CONFIG, "--world", "/nonexistent"])
    assert r.exit_code == ex.EXIT_MISSING_INPUT


def test_world_hash_mismatch(workdir, tmp_path):
    cfg = yaml.safe_load(open(CONFIG))
    cfg["world"]["seed"] = 999
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(cfg))
    runner = CliRunner()
    r = runner.invoke(main, ["train-teacher", "--config", str(other), "--world", str(workdir / "world")])
    assert r.exit_code == ex.EXIT_HASH_MISMATCH
    assert "config-hash mismatch" in r.output


def test_teacher_hash_mismatch(workdir, tmp_path):
    # same world section, different teacher section -> world loads, teacher refuses
    cfg = yaml.safe_load(open(CONFIG))
    cfg["teacher"]["epochs"] = 99
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(cfg))
    runner = CliRunner()
    r = runner.invoke(main, ["distill", "--config", str(other), "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz")])
    assert r.exit_code == ex.EXIT_HASH_MISMATCH


def test_missing_teacher_file(workdir):
    runner = CliRunner()
    r = runner.invoke(main, ["distill", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "nope.npz")])
    assert r.exit_code == ex.EXIT_MISSING_INPUT


def test_distill_run_artifacts(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    r = runner.invoke(main, ["distill", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz"), "--out", str(out)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["variant"] == "st+m+of"
    assert set(metrics["models"]) == {"teacher", "aux", "final"}
    assert metrics["filter"]["kept"] == 120  # ceil(0.8 * 150)
    assert (out / "timings.json").exists()
    assert (out / "tables" / "test_per_sample.csv").exists()
    assert (out / "tables" / "adapt_d_vs_teacher_eps.csv").exists()
    snapshot = yaml.safe_load((out / "config.yaml").read_text())
    assert snapshot["_config_hash"] == ex.config_hash(yaml.safe_load(open(CONFIG)))


def test_distill_variant_option(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    r = runner.invoke(main, ["distill", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz"),
                             "--variant", "st+m-of", "--out", str(out)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["variant"] == "st+m-of"
    assert "filter" not in metrics


def test_baseline_em(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    r = runner.invoke(main, ["baseline-em", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz"),
                             "--omega", "0.1", "--out", str(out)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["omega"] == 0.1
    assert "target_val" in metrics and "test" in metrics


def test_baseline_noisy_ft(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    r = runner.invoke(main, ["baseline-noisy-ft", "--config", CONFIG,
                             "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz"),
                             "--bound", "2.0", "--out", str(out)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["bound_m"] == 2.0 and metrics["clamped"] >= 0


def test_baseline_entropy_filter(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    r = runner.invoke(main, ["baseline-entropy-filter", "--config", CONFIG,
                             "--world", str(workdir / "world"),
                             "--teacher", str(workdir / "teacher.npz"), "--out", str(out)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["kept"] == 120


def test_eval_and_compare(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "eval"
    r = runner.invoke(main, ["eval", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--weights", str(workdir / "teacher.npz"), "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "tables" / "per_sample.csv").exists()

    out2 = tmp_path / "cmp"
    r = runner.invoke(main, ["compare", "--config", CONFIG, "--world", str(workdir / "world"),
                             "--weights-a", str(workdir / "teacher.npz"),
                             "--weights-b", str(workdir / "teacher.npz"), "--out", str(out2)])
    assert r.exit_code == 0, r.output
    metrics = json.loads((out2 / "metrics.json").read_text())
    assert metrics["unchanged"] == 80


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.OUTPUT_ROOT_ENV, str(tmp_path / "routed"))
    runner = CliRunner()
    r = runner.invoke(main, ["gen-world", "--config", CONFIG])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "routed").is_dir()
    assert any((tmp_path / "routed").iterdir())


def test_reproduce_all_summary(tmp_path):
    runner = CliRunner()
    out = tmp_path / "rep"
    r = runner.invoke(main, ["reproduce-all", "--config", CONFIG, "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert "teacher" in r.output and "st+m+of" in r.output
    metrics = json.loads((out / "metrics.json").read_text())
    for key in ("teacher", "st-m-of", "st+m-of", "st+m+of", "st+m+a",
                "entropy-filter", "entropy-min", "noisy-ft"):
        assert key in metrics
    assert (out / "summary.csv").exists()


def test_config_hash_stability():
    h1 = ex.config_hash({"a": 1, "b": [1, 2]})
    h2 = ex.config_hash({"b": [1, 2], "a": 1})
    assert h1 == h2 and len(h1) == 16
    assert ex.config_hash({"a": 2}) != h1
