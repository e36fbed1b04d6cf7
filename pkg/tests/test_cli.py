import io

import numpy as np
import pytest

from stereoguide.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, UsageError, apply_thread_cap, default_config,
                             parse_config, parse_weight_overrides, run)
from stereoguide.data_io import (DepthRaster, Category, PredictionRecord, GroundTruthObject, bev_to_camera_box,
                                 save_depth_raster, serialize_labels, serialize_predictions)
from stereoguide.boxes import Box3D
from stereoguide.heatmap_export import read_pgm

CALIB = "P2: 700 0 600 0 0 700 180 0 0 0 1 0\nP3: 700 0 600 -378 0 700 180 0 0 0 1 0\n"


def call(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], out)
    return code, out.getvalue()


def test_config_parsing():
    cfg = default_config()
    assert cfg["lambda_object"] == 0.01 and cfg["feature_normalize"] is True and cfg["eval_every"] == 0
    assert cfg["joint"] is False
    assert parse_config("lr = 0.5  # faster\n\n# comment only\n") == {"lr": 0.5}
    for bad in ("lr 0.5", "nope = 1", "lr = -1", "bg_normalizer = both", "feature_normalize = maybe"):
        with pytest.raises(UsageError):
            parse_config(bad)


def test_weight_override_aliases():
    assert parse_weight_overrides("λ_object=0.02, lambda_anchor=0") == {"lambda_object": 0.02,
                                                                         "lambda_anchor": 0.0}
    for bad in ("λ_nothing=1", "lambda_object", "lambda_object=-1"):
        with pytest.raises(UsageError):
            parse_weight_overrides(bad)


def test_thread_cap():
    env = {"SGM3D_THREADS": "2"}
    apply_thread_cap(env)
    assert env["OPENBLAS_NUM_THREADS"] == "2" and env["OMP_NUM_THREADS"] == "2"
    for bad in ("0", "two"):
        with pytest.raises(UsageError):
            apply_thread_cap({"SGM3D_THREADS": bad})


def test_usage_errors(tmp_path, monkeypatch):
    assert call()[0] == EXIT_USAGE
    assert call("bogus")[0] == EXIT_USAGE
    assert call("--config", tmp_path / "missing.cfg", "losses")[0] == EXIT_USAGE
    (tmp_path / "bad.cfg").write_text("lr = fast\n")
    assert call("--config", tmp_path / "bad.cfg", "losses")[0] == EXIT_USAGE
    assert call("gradcheck", "--only", "nothing")[0] == EXIT_USAGE
    assert call("train-demo", "--groups", "xz")[0] == EXIT_USAGE
    assert call("heatmap")[0] == EXIT_USAGE
    monkeypatch.setenv("SGM3D_THREADS", "-3")
    assert call("losses")[0] == EXIT_USAGE


def test_losses_are_deterministic_and_weighted(tmp_path):
    code, first = call("losses", "--seed", 1)
    assert code == EXIT_OK
    assert call("losses", "--seed", 1)[1] == first
    rows = dict(line.split() for line in first.splitlines())
    assert list(rows)[:3] == ["L_feature", "L_anchor", "L_MG-DA"] and "L_total" in rows
    doubled = dict(line.split() for line in call("losses", "--seed", 1, "--weights", "λ_object=0.02")[1]
                   .splitlines())
    assert float(doubled["L_IoU-MA"]) == pytest.approx(2 * float(rows["L_IoU-MA"]), rel=1e-9)
    sample = tmp_path / "sample.npz"
    call("losses", "--seed", 1, "--save-sample", sample)
    assert call("losses", "--input", sample)[1] == first
    np.savez(tmp_path / "partial.npz", F_M=np.zeros(3))
    assert call("losses", "--input", tmp_path / "partial.npz")[0] == EXIT_DATA
    assert call("losses", "--input", tmp_path / "absent.npz")[0] == EXIT_DATA


def test_gradcheck_command():
    code, text = call("gradcheck", "--instances", 2, "--only", "feature,anchor")
    assert code == EXIT_OK
    assert text.splitlines()[-1] == "2/2 losses within 1e-06 over 2 instances"


def test_convert_round_trip(tmp_path):
    (tmp_path / "calib.txt").write_text(CALIB)
    rng = np.random.default_rng(0)
    values = np.where(rng.random((12, 16)) < 0.7, rng.uniform(2, 40, (12, 16)), 0.0).astype(np.float32)
    save_depth_raster(DepthRaster(16, 12, values), tmp_path / "d.sgmd")
    assert call("convert", "--input", tmp_path / "d.sgmd", "--output", tmp_path / "pc.txt",
                "--calib", tmp_path / "calib.txt")[0] == EXIT_OK
    code, _ = call("convert", "--input", tmp_path / "pc.txt", "--output", tmp_path / "back.sgmd",
                   "--calib", tmp_path / "calib.txt", "--size", "16x12")
    assert code == EXIT_OK
    assert (tmp_path / "back.sgmd").read_bytes() == (tmp_path / "d.sgmd").read_bytes()
    assert call("convert", "--input", tmp_path / "pc.txt", "--output", tmp_path / "x",
                "--calib", tmp_path / "calib.txt")[0] == EXIT_USAGE
    assert call("convert", "--input", tmp_path / "none", "--output", tmp_path / "x",
                "--calib", tmp_path / "calib.txt")[0] == EXIT_DATA


def test_eval_command(tmp_path):
    pred, lab = tmp_path / "pred", tmp_path / "lab"
    pred.mkdir(), lab.mkdir()
    box = Box3D(10.0, 0.0, 0.75, 3.9, 1.6, 1.5)
    loc, dims, yaw = bev_to_camera_box(box)
    gt = GroundTruthObject(Category.CAR, 0.0, 0, 0.0, (0.0, 100.0, 50.0, 160.0), dims, loc, yaw)
    (lab / "000000.txt").write_text(serialize_labels([gt]))
    (pred / "000000.txt").write_text(serialize_predictions([PredictionRecord(box, 0.9, bbox2d=gt.bbox2d)]))
    code, text = call("eval", "--pred", pred, "--labels", lab)
    assert code == EXIT_OK
    assert text.splitlines()[1].split() == ["AP_3D", "100.00", "100.00", "100.00"]
    assert call("eval", "--pred", pred, "--labels", lab)[1] == text
    assert call("eval", "--pred", tmp_path / "none", "--labels", lab)[0] == EXIT_DATA


def test_heatmap_command(tmp_path):
    m = np.zeros((2, 10, 10))
    m[:, 3, 4] = 1.0
    np.save(tmp_path / "m.npy", m)
    np.savez(tmp_path / "m.npz", bev=m)
    assert call("heatmap", "--input", tmp_path / "m.npy", "--output", tmp_path / "a.pgm")[0] == EXIT_OK
    assert call("heatmap", "--input", tmp_path / "m.npz", "--key", "bev", "--output", tmp_path / "b.pgm")[0] == 0
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    assert read_pgm(tmp_path / "a.pgm")[10 - 1 - 3, 10 - 1 - 4] == 255
    assert call("heatmap", "--input", tmp_path / "m.npz", "--key", "x", "--output", tmp_path / "c.pgm")[0] == 3


def test_train_demo_is_byte_identical(tmp_path):
    (tmp_path / "small.cfg").write_text("eval_scenes = 4\n")
    argv = ("--config", tmp_path / "small.cfg", "train-demo", "--groups", "af", "--scenes", 6, "--epochs", 2)
    code, first = call(*argv, "--out", tmp_path / "t.md", "--log", tmp_path / "log.jsonl")
    assert code == EXIT_OK
    assert first.startswith("| group |") and "| f | x | x | x |" in first
    assert (tmp_path / "t.md").read_text() == first
    assert call(*argv)[1] == first
