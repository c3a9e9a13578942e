import json

import numpy as np
import pytest

from mvsrefine import io
from mvsrefine.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--count", "2", "--width", "96", "--height", "80",
                 "--seed", "5", "--kinds", "plane,wedge"]) == 0
    return out


def test_synth_outputs(dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    assert len(m["scenes"]) == 2 and m["schema_version"] == 1
    man = json.loads((dataset / "run_manifest.json").read_text())
    assert man["command"] == "synth" and man["options"]["seed"] == 5


def test_refine_oracle_and_eval(dataset, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["refine", "--data", str(dataset), "--scene", "1", "--scorer", "oracle", "--trace",
                 "--out", str(out), "--threads", "1"]) == 0
    depth = io.read_pfm(out / "depth.pfm")
    assert depth.shape == (20, 24)            # 1/4 of 96x80
    assert io.read_pnm(out / "normals.ppm").shape == (20, 24, 3)
    rows = (out / "trace.csv").read_text().splitlines()
    assert rows[0].startswith("stage,iteration,kind") and len(rows) == 13
    assert set(json.loads((out / "timing.json").read_text())) >= {"features", "wta", "stage0"}
    assert json.loads((out / "run_manifest.json").read_text())["config"]["schema_version"] == 1
    capsys.readouterr()
    assert main(["eval", "--pred", str(out / "depth.pfm"), "--data", str(dataset), "--scene", "1",
                 "--out", str(tmp_path / "e")]) == 0
    assert "%<1mm" in capsys.readouterr().out
    rep = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert rep["pct_below_pd"]["1"] > 95.0


def test_eval_pred_equals_gt(dataset, tmp_path, capsys):
    entry = json.loads((dataset / "manifest.json").read_text())["scenes"][0]
    gt = dataset / entry["views"][0]["depth"]
    cam = dataset / entry["views"][0]["camera"]
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--camera", str(cam), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep["pct_below_mm"]["1"] == 100.0 and rep["mae_at_mm"]["1"] == 0.0
    assert all(v == 100.0 for v in rep["normal_pct"].values())


def test_train_then_refine(dataset, tmp_path):
    out = tmp_path / "t"
    assert main(["train", "--data", str(dataset), "--steps", "2", "--crop-height", "64", "--crop-width", "64",
                 "--out", str(out), "--seed", "1", "--threads", "1"]) == 0
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss_fm,loss_cl" and len(lines) == 3
    w = io.load_weights(out / "weights.chsn")
    assert any(k.startswith("match") for k in w)
    r = tmp_path / "r"
    assert main(["refine", "--data", str(dataset), "--weights", str(out / "weights.chsn"), "--out", str(r)]) == 0
    assert np.isfinite(io.read_pfm(r / "depth.pfm")).any()


def test_gradcheck_table(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(line.endswith("PASS") for line in lines[:-1])
    assert lines[-1].startswith(f"{len(lines) - 1}/{len(lines) - 1} passed")


def test_missing_dataset_is_error(tmp_path, capsys):
    assert main(["refine", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "dataset not found" in capsys.readouterr().err


def test_malformed_config_names_line(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "n_full": 64,\n  "seed": oops\n}\n')
    assert main(["refine", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert f"{cfg}:3:" in capsys.readouterr().err


def test_malformed_camera_names_line(dataset, tmp_path, capsys):
    entry = json.loads((dataset / "manifest.json").read_text())["scenes"][0]
    gt = dataset / entry["views"][0]["depth"]
    cam = tmp_path / "cam.txt"
    lines = (dataset / entry["views"][0]["camera"]).read_text().splitlines()
    lines[3] = "0 1 oops 0"
    cam.write_text("\n".join(lines) + "\n")
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--camera", str(cam)]) == 1
    assert f"{cam}:4:" in capsys.readouterr().err


def test_scene_index_out_of_range(dataset, tmp_path, capsys):
    assert main(["refine", "--data", str(dataset), "--scene", "7", "--scorer", "oracle",
                 "--out", str(tmp_path)]) == 1
    assert "out of range" in capsys.readouterr().err


def test_out_required(capsys):
    assert main(["synth"]) == 2
