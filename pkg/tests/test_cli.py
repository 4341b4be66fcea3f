import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from s3pt.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from s3pt.config import save_config
from s3pt.io import read_pgm
from s3pt.vmf import log_vmf_normalizer_np

from .fixtures import tiny_config


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg_path = save_config(tiny_config(total_steps=4), out / "input.txt")
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    return out


def test_train_writes_artifacts(run_dir):
    assert (run_dir / "config.txt").exists() and (run_dir / "checkpoint.bin").exists()
    rows = list(csv.DictReader(open(run_dir / "log.csv")))
    assert len(rows) == 4


def test_flag_overrides_config(tmp_path):
    cfg_path = save_config(tiny_config(total_steps=4), tmp_path / "in.txt")
    argv = ["train", "--config", str(cfg_path), "--train.total_steps", "2", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert "train.total_steps = 2 steps" in (tmp_path / "config.txt").read_text()
    assert len(list(csv.DictReader(open(tmp_path / "log.csv")))) == 2


def test_resume_continues(tmp_path):
    cfg_path = save_config(tiny_config(total_steps=4), tmp_path / "in.txt")
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--stop-at", "2"]) == EXIT_OK
    assert main(["train", "--resume", str(tmp_path / "checkpoint.bin"), "--out", str(tmp_path)]) == EXIT_OK
    assert len(list(csv.DictReader(open(tmp_path / "log.csv")))) == 4


def test_eval_and_probe(run_dir):
    assert main(["eval", str(run_dir / "checkpoint.bin"), "--scenes", "2", "--out", str(run_dir)]) == EXIT_OK
    metrics = json.loads((run_dir / "metrics_clustering.json").read_text())
    assert 0 <= metrics["purity"] <= 1
    argv = ["probe", str(run_dir / "checkpoint.bin"), "--train-scenes", "2", "--test-scenes", "2", "--steps", "10", "--out", str(run_dir)]
    assert main(argv) == EXIT_OK
    assert 0 <= json.loads((run_dir / "metrics_probe.json").read_text())["miou"] <= 1


@pytest.mark.parametrize("color", [False, True])
def test_export(run_dir, color):
    argv = ["export", str(run_dir / "checkpoint.bin"), "--scene-seed", "7", "--out", str(run_dir)]
    assert main(argv + (["--color"] if color else [])) == EXIT_OK
    ext = "ppm" if color else "pgm"
    assert (run_dir / f"segments_7_A.{ext}").exists() and (run_dir / f"segments_7_B.{ext}").exists()
    if not color:
        labels = read_pgm(run_dir / "segments_7_A.pgm")
        assert labels.shape == (32, 32) and labels.max() < 4
    stats = (run_dir / "segments_7.txt").read_text().splitlines()
    assert stats[0] == "cluster area view_a view_b" and len(stats) == 5


def test_vmf_dump(tmp_path):
    out = tmp_path / "v.csv"
    assert main(["vmf-dump", "--dim", "3", "64", "--num", "5", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 10 and rows[0]["dim"] == "3"
    for row in rows:
        assert float(row["log_c"]) == log_vmf_normalizer_np(float(row["kappa"]), int(row["dim"]))


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--train.bank_mode", "cosine", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == EXIT_CONFIG
    bad = tmp_path / "bad.txt"
    bad.write_text("train.total_steps = 5\n")  # unit missing
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"junk" * 10)
    assert main(["eval", str(tmp_path / "junk.bin")]) == EXIT_RUNTIME
    assert main(["eval", str(tmp_path / "nothing.bin")]) == EXIT_RUNTIME


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "s3pt.cli", "vmf-dump", "--num", "2"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines()[0] == "dim,kappa,log_c"
    proc = subprocess.run([sys.executable, "-m", "s3pt.cli", "train", "--train.batch_size", "x"], capture_output=True, text=True)
    assert proc.returncode == 1
