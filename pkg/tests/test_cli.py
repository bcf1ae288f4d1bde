import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from gazerep.cli import main

SMALL = ["--set", "corpus.n_subjects=3", "--set", "corpus.samples_per_subject=20", "--threads", "1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pseudo-label -> train -> probe, shared by the tests below."""
    root = tmp_path_factory.mktemp("runs")
    out = {}

    def step(*argv):
        res = subprocess.run([sys.executable, "-m", "gazerep.cli", *argv, "--out", str(root)],
                             capture_output=True, text=True, check=True)
        return json.loads(res.stdout)

    out["gen"] = step("gen-data", "--zones", "9", *SMALL, "--seed", "1")
    out["label"] = step("pseudo-label", "--manifest", out["gen"]["manifest"], "--labeler", "geometric",
                        "--set", "noise.gaze_sigma_deg=1.0")
    out["train"] = step("train", "--manifest", out["label"]["manifest"], "--set", "train.epochs=2", "--threads", "1")
    out["probe"] = step("probe", "--checkpoint", out["train"]["checkpoint"], "--manifest", out["gen"]["manifest"],
                        "--set", "adapt.epochs=2", "--set", "adapt.lr=0.01")
    out["root"] = root
    return out


def test_pipeline_writes_run_records(pipeline):
    for name in ("gen", "label", "train", "probe"):
        run_dir = Path(pipeline[name]["run_dir"])
        assert (run_dir / "config.txt").exists()
        rec = json.loads((run_dir / "run.json").read_text())
        assert "metrics" in rec and "inputs" in rec
    assert pipeline["label"]["labeled"] + pipeline["label"]["dropped"] == 60
    assert pipeline["train"]["epochs"] == 2
    assert pipeline["probe"]["mean"] > 0 and pipeline["probe"]["n"] > 0
    assert Path(pipeline["probe"]["run_dir"]).name.startswith("probe-")


def test_knn_and_report(pipeline, capsys, tmp_path):
    code, knn, _ = run(capsys, "knn", "--checkpoint", pipeline["train"]["checkpoint"],
                       "--manifest", pipeline["gen"]["manifest"], "--out", str(tmp_path), "--set", "adapt.k=3")
    assert code == 0 and 0 <= knn["accuracy"] <= 1
    dirs = [pipeline[k]["run_dir"] for k in ("train", "probe")]
    code, rep, _ = run(capsys, "report", *dirs, "--out", str(tmp_path))
    assert code == 0 and rep["ablation_rows"] == 8
    rows = list(csv.DictReader(open(Path(rep["run_dir"]) / "ablation.csv")))
    assert len(rows) == 8 and rows[-1]["tasks"].endswith("+ NLL")
    assert rows[-1]["runs"] == "1"  # the default training config enables all tasks and NLL
    for name in ("calibration_curves.csv", "calibration_curves.png", "loss_curves.csv", "loss_curves.png"):
        assert (Path(rep["run_dir"]) / name).exists()


def test_zone_head_without_zone_labels_fails_naming_field(pipeline, capsys, tmp_path):
    code, gen, _ = run(capsys, "gen-data", "--set", "corpus.n_subjects=1", "--set", "corpus.samples_per_subject=10",
                       "--out", str(tmp_path))
    assert code == 0
    code, _, err = run(capsys, "probe", "--checkpoint", pipeline["train"]["checkpoint"], "--head", "zone",
                       "--manifest", gen["manifest"], "--out", str(tmp_path))
    assert code != 0
    line = json.loads(err.strip().splitlines()[-1])
    assert "gt_zone" in line["message"]


def test_unknown_config_key_is_a_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--set", "corpus.colour=blue", "--out", str(tmp_path))
    assert code == 2
    assert json.loads(err.strip())["error"] == "ConfigError"
    assert not any(tmp_path.iterdir())


def test_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "probe", "--checkpoint", str(tmp_path / "x.npz"), "--manifest", str(tmp_path),
                       "--out", str(tmp_path / "o"))
    assert code == 2 and "not found" in json.loads(err.strip())["message"]


def test_output_root_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("GAZEREP_OUT", str(tmp_path / "env"))
    code, res, _ = run(capsys, "gen-data", "--set", "corpus.n_subjects=1", "--set", "corpus.samples_per_subject=2")
    assert code == 0 and res["run_dir"].startswith(str(tmp_path / "env"))
