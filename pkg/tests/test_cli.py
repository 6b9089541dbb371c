import hashlib
import json
import os
import subprocess
import sys

import pytest

PKG = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TINY_TRAIN = [
    "--schedule", "2e-3:2",
    "--feature-dim", "16",
    "--conv-channels", "4,6,8",
    "--head-widths", "32,24",
    "--transformer-widths", "24,24",
    "--batch-size", "16",
    "--geodesic-extras", "0",
]


def run_cli(*args, check=True):
    proc = subprocess.run(
        [sys.executable, "-m", "eqservo.cli", *args],
        capture_output=True,
        text=True,
        cwd=PKG,
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"cli failed ({proc.returncode}):\n{proc.stdout}\n{proc.stderr}")
    return proc


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    run_cli(
        "gen-data", "--object", "textured-cube", "--views", "10", "--pairs", "24",
        "--image-size", "16", "--seed", "3", "--out", out,
    )
    return out


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_data, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    run_cli("train", "--data", tiny_data, *TINY_TRAIN, "--seed", "1", "--out", out)
    return os.path.join(out, "model.ckpt")


def test_gen_data_missing_out_usage_error():
    proc = run_cli("gen-data", check=False)
    assert proc.returncode == 2


def test_gen_data_reports_counts(tiny_data):
    manifest = json.load(open(os.path.join(tiny_data, "manifest.json")))
    assert len(manifest["samples"]) == 10
    assert len(manifest["pairs"]) == 24
    assert manifest["config_digest"]


def test_gen_data_deterministic_rerun(tiny_data, tmp_path):
    out2 = str(tmp_path / "again")
    run_cli(
        "gen-data", "--object", "textured-cube", "--views", "10", "--pairs", "24",
        "--image-size", "16", "--seed", "3", "--out", out2,
    )
    assert sha(os.path.join(tiny_data, "manifest.json")) == sha(os.path.join(out2, "manifest.json"))
    assert sha(os.path.join(tiny_data, "images/000000.png")) == sha(
        os.path.join(out2, "images/000000.png")
    )


def test_train_writes_stats_and_checkpoint(tiny_data, tiny_ckpt):
    stats = os.path.join(os.path.dirname(tiny_ckpt), "stats.csv")
    lines = open(stats).read().splitlines()
    assert lines[1] == "epoch,loss_equi,loss_geo,loss_total"
    assert len(lines) == 2 + 2  # comment + header + 2 epochs
    assert os.path.exists(tiny_ckpt)


def test_train_epochs_zero_equals_initialization(tiny_data, tmp_path):
    outs = []
    for name, epochs in (("a", "0"), ("b", "0")):
        out = str(tmp_path / name)
        run_cli(
            "train", "--data", tiny_data, "--schedule", f"1e-3:{epochs}",
            *TINY_TRAIN[2:], "--seed", "7", "--out", out,
        )
        outs.append(out)
    # Two epoch-0 runs from the same seed produce identical checkpoints, and
    # the stats file holds exactly zero rows.
    assert sha(os.path.join(outs[0], "model.ckpt")) == sha(os.path.join(outs[1], "model.ckpt"))
    lines = open(os.path.join(outs[0], "stats.csv")).read().splitlines()
    assert len(lines) == 2


def test_train_rerun_identical_checkpoint(tiny_data, tiny_ckpt, tmp_path):
    out2 = str(tmp_path / "rerun")
    run_cli("train", "--data", tiny_data, *TINY_TRAIN, "--seed", "1", "--out", out2)
    assert sha(tiny_ckpt) == sha(os.path.join(out2, "model.ckpt"))


def test_train_corrupt_manifest_exit_1(tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text("{not json")
    proc = run_cli("train", "--data", str(bad), *TINY_TRAIN, check=False)
    assert proc.returncode == 1
    assert "error" in proc.stderr.lower()


def test_eval_unknown_method_usage_error(tiny_data, tiny_ckpt):
    proc = run_cli(
        "eval", "--data", tiny_data, "--ckpt", tiny_ckpt, "--methods", "ours,magic",
        check=False,
    )
    assert proc.returncode == 2
    assert "magic" in proc.stderr
    assert "ibvs" in proc.stderr  # lists valid methods


def test_eval_missing_checkpoint_exit_1(tiny_data, tmp_path):
    proc = run_cli(
        "eval", "--data", tiny_data, "--ckpt", str(tmp_path / "nope.ckpt"),
        "--methods", "ours", "--trials", "1", "--out", str(tmp_path / "out"),
        check=False,
    )
    assert proc.returncode == 1
    report = os.path.join(str(tmp_path / "out"), "report.csv")
    assert not os.path.exists(report)  # no partial outputs


def test_eval_ibvs_only_runs(tiny_data, tmp_path):
    out = str(tmp_path / "ibvs")
    run_cli(
        "eval", "--data", tiny_data, "--methods", "ibvs", "--trials", "2",
        "--max-iters", "10", "--seed", "5", "--out", out,
    )
    report = open(os.path.join(out, "report.csv")).read().splitlines()
    assert report[1].startswith("object,method,trials,mean_add")
    assert any(line.split(",")[1] == "ibvs" for line in report[2:])
    assert os.path.exists(os.path.join(out, "pcs_curve_ibvs.csv"))


def test_servo_runs_and_reports(tiny_data, tiny_ckpt, tmp_path):
    out = str(tmp_path / "servo")
    proc = run_cli(
        "servo", "--data", tiny_data, "--ckpt", tiny_ckpt, "--start-angle", "40",
        "--max-iters", "3", "--seed", "2", "--out", out,
    )
    assert "final angle error" in proc.stdout
    lines = open(os.path.join(out, "trajectory.csv")).read().splitlines()
    assert lines[1] == "iteration,azimuth,elevation,roll,residual,angle_to_goal"


def test_costmap_grid_shape(tiny_data, tiny_ckpt, tmp_path):
    out = str(tmp_path / "cmap")
    run_cli(
        "costmap", "--data", tiny_data, "--ckpt", tiny_ckpt, "--grid", "5",
        "--seed", "4", "--out", out, "--png",
    )
    rows = [l for l in open(os.path.join(out, "costmap.csv")).read().splitlines() if not l.startswith("#")]
    assert len(rows) == 5
    assert all(len(r.split(",")) == 5 for r in rows)
    assert os.path.exists(os.path.join(out, "costmap.png"))


def test_costmap_rerun_byte_identical(tiny_data, tiny_ckpt, tmp_path):
    outs = []
    for name in ("m1", "m2"):
        out = str(tmp_path / name)
        run_cli(
            "costmap", "--data", tiny_data, "--ckpt", tiny_ckpt, "--grid", "4",
            "--seed", "4", "--out", out,
        )
        outs.append(os.path.join(out, "costmap.csv"))
    assert sha(outs[0]) == sha(outs[1])


def test_checkpoint_dataset_digest_mismatch_rejected(tiny_ckpt, tmp_path):
    other = str(tmp_path / "otherdata")
    run_cli(
        "gen-data", "--object", "cylinder", "--views", "8", "--pairs", "12",
        "--image-size", "16", "--seed", "9", "--out", other,
    )
    proc = run_cli(
        "servo", "--data", other, "--ckpt", tiny_ckpt, "--max-iters", "2",
        "--out", str(tmp_path / "s"), check=False,
    )
    assert proc.returncode == 1
    assert "digest" in proc.stderr


def test_config_json_written_with_digest(tiny_data):
    cfg = json.load(open(os.path.join(tiny_data, "config.json")))
    assert cfg["command"] == "gen-data"
    assert len(cfg["config_digest"]) == 16
