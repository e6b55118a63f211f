"""Command line interface tests: pipeline smoke runs and exit codes."""

import json
import os
import subprocess
import sys

import pytest

from densindex.cli import main
from densindex import read_index_csv


SYNTH_ARGS = ["synth", "--scenario", "standard", "--seed", "3",
              "--n-weeks", "24", "--sales-per-week", "5"]
TRAIN_FAST = ["--ensemble", "1", "--components", "2", "--epochs", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth + train run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert main(SYNTH_ARGS + ["--out", str(data_dir)]) == 0
    model_path = root / "model.json"
    code = main(["train", "--data", str(data_dir / "sales.csv"),
                 "--registry", str(data_dir / "registry.json"),
                 "--out", str(model_path), "--seed", "1", *TRAIN_FAST])
    assert code == 0
    return root


def test_synth_outputs(workspace):
    data_dir = workspace / "data"
    assert (data_dir / "sales.csv").exists()
    assert (data_dir / "registry.json").exists()
    assert (data_dir / "ground_truth.json").exists()
    header = (data_dir / "sales.csv").read_text().splitlines()[0]
    assert header.startswith("dwelling_id,price,date,region,prop_type")
    registry = json.loads((data_dir / "registry.json").read_text())
    assert {r["id"] for r in registry["regions"]} == {"R0", "R1", "R2", "R3"}


def test_synth_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SYNTH_ARGS + ["--out", str(a)]) == 0
    assert main(SYNTH_ARGS + ["--out", str(b)]) == 0
    assert (a / "sales.csv").read_bytes() == (b / "sales.csv").read_bytes()
    assert (a / "ground_truth.json").read_bytes() == (b / "ground_truth.json").read_bytes()


def test_train_output_loads(workspace):
    from densindex import load_model, MixtureDensityEnsemble
    model = load_model(workspace / "model.json")
    assert isinstance(model, MixtureDensityEnsemble)
    assert len(model.members_) == 1


def test_index_command(workspace, tmp_path):
    data_dir = workspace / "data"
    out = tmp_path / "idx"
    code = main(["index", "--model", str(workspace / "model.json"),
                 "--data", str(data_dir / "sales.csv"),
                 "--registry", str(data_dir / "registry.json"),
                 "--out", str(out), "--percentiles", "20,80"])
    assert code == 0
    series = read_index_csv(out / "indices.csv")
    kinds = {s.kind for s in series}
    assert {"d_median", "d_gmean", "d_mean", "d_q20", "d_q80",
            "hedonic", "repeat_sales"} <= kinds
    scopes = {s.scope for s in series}
    assert any(s.startswith("M0/") for s in scopes)   # metro level
    assert any(s.startswith("R0/") for s in scopes)   # per region
    payload = json.loads((out / "densities.json").read_text())
    assert payload["series"], "density dump is empty"


def test_validate_command(workspace, tmp_path):
    data_dir = workspace / "data"
    out = tmp_path / "val"
    code = main(["validate", "--data", str(data_dir / "sales.csv"),
                 "--registry", str(data_dir / "registry.json"),
                 "--out", str(out), "--folds", "2", "--ensemble", "1",
                 "--components", "2", "--epochs", "4",
                 "--checks", "kfold,calibration,persistence,nll"])
    assert code == 0
    for name in ("projection_errors.csv", "nemenyi.csv", "rank_test.json",
                 "calibration_curve.csv", "median_calibration.csv",
                 "persistence.csv", "nll.json", "summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert "kfold" in summary and "nll" in summary
    rank = json.loads((out / "rank_test.json").read_text())
    assert set(rank["methods"]) == {"hedonic", "repeat_sales", "d_gmean",
                                    "d_subregion"}
    nll = json.loads((out / "nll.json").read_text())
    assert {"train_nll", "holdout_nll", "gap"} <= set(nll)


def test_missing_data_file_is_exit_2(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nope.csv"),
                 "--registry", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "m.json")])
    assert code == 2


def test_bad_usage_is_exit_1(tmp_path):
    assert main(["synth", "--scenario", "no-such", "--out", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["index", "--model", "m", "--data", "d"]) == 1  # missing required


def test_bad_percentiles_is_exit_1(workspace, tmp_path):
    data_dir = workspace / "data"
    code = main(["index", "--model", str(workspace / "model.json"),
                 "--data", str(data_dir / "sales.csv"),
                 "--registry", str(data_dir / "registry.json"),
                 "--out", str(tmp_path / "x"), "--percentiles", "0,150"])
    assert code == 1


def test_corrupt_sales_is_exit_2(workspace, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("dwelling_id,price,date,region,prop_type,bedrooms,"
                   "land_area,bathrooms,parking\nD1,x,y,z,w,1,2,3,4\n")
    code = main(["train", "--data", str(bad),
                 "--registry", str(workspace / "data" / "registry.json"),
                 "--out", str(tmp_path / "m.json"), *TRAIN_FAST])
    assert code == 2


def test_env_var_override(workspace, tmp_path, monkeypatch):
    # DENSINDEX_TRAIN_EPOCHS feeds the --epochs option through the env
    data_dir = workspace / "data"
    monkeypatch.setenv("DENSINDEX_TRAIN_EPOCHS", "2")
    model_path = tmp_path / "m.json"
    code = main(["train", "--data", str(data_dir / "sales.csv"),
                 "--registry", str(data_dir / "registry.json"),
                 "--out", str(model_path), "--ensemble", "1",
                 "--components", "2"])
    assert code == 0
    payload = json.loads(model_path.read_text())
    member = payload["members"][0]
    assert member["config"]["n_epochs"] == 2


def test_console_script_installed():
    result = subprocess.run(["densindex", "--help"], capture_output=True,
                            text=True, timeout=60)
    assert result.returncode == 0
    for cmd in ("synth", "train", "index", "validate"):
        assert cmd in result.stdout


def test_help_mentions_exit_codes():
    result = subprocess.run([sys.executable, "-m", "densindex.cli", "--help"],
                            capture_output=True, text=True, timeout=60)
    assert result.returncode == 0
