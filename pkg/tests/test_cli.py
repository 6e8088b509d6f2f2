import csv

import numpy as np
import pytest

from crlstereo import data_io
from crlstereo.cli import main
from crlstereo.networks import load_checkpoint


def test_synth_writes_dataset_and_manifest(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--preset", "tiny", "--count", "3", "--seed", "5", "--out", str(out)]) == 0
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert manifest[0].startswith("# ") and "seed=5" in manifest[0]
    assert manifest[1:] == ["000000", "000001", "000002"]
    assert len(data_io.load_dataset(out)) == 3


def test_synth_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--count", "1", "--out", str(blocker / "sub")]) == 2


def test_synth_from_spec(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text('{"width": 64, "height": 32, "background": 1.0,'
                    ' "rects": [{"x": 5, "y": 5, "w": 10, "h": 10, "disparity": 6.0}]}')
    out = tmp_path / "ds"
    assert main(["synth", "--spec", str(spec), "--count", "2", "--out", str(out)]) == 0
    d, _ = data_io.read_disparity(out / "disp" / "000001.pfm")
    assert d.shape == (32, 64) and d.max() == 6.0


def _config(tmp_path, extra=""):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "schedule = 1F-2F-0F\ndataset.F = synth:6:0:tiny\nsteps = 2\nbatch = 2\nbatch_overall = 2\n"
        "width = 0.125\nmax_disp = 4\nseed = 0\n" + extra
    )
    return cfg


def test_train_writes_checkpoints_log_and_phase_table(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path)), "--out", str(out)]) == 0
    for name in ("phase1_1F.ckpt", "phase2_2F.ckpt", "phase3_0F.ckpt", "final.ckpt"):
        assert (out / name).exists()
    rows = list(csv.reader((out / "phases.csv").open()))
    assert [r[1] for r in rows[1:]] == ["1F", "2F", "0F"]
    assert rows[1][2] == rows[2][2]  # stage 1 untouched by the 2F phase
    assert rows[2][2] != rows[3][2]
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("# seed=0")
    assert log[1].startswith("step,phase,loss")
    assert len(log) == 2 + 6
    model, meta = load_checkpoint(out / "final.ckpt")
    assert meta["phase"] == "final"


def test_train_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = 1e-4\nsteps = many\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_train_divergence_exit_code(tmp_path):
    cfg = _config(tmp_path, "lr = 1e30\nsteps = 8\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3


def test_infer_and_eval(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path)), "--out", str(run)]) == 0
    s = data_io.synthesize_dataset(1, 3, preset="tiny")[0]
    data_io.save_sample(tmp_path / "gt", s)
    left, right = tmp_path / "gt" / "left" / "000000.png", tmp_path / "gt" / "right" / "000000.png"
    preds = tmp_path / "pred"
    preds.mkdir()
    res = tmp_path / "res.pfm"
    assert main(["infer", "--ckpt", str(run / "final.ckpt"), "--left", str(left), "--right", str(right),
                 "--out", str(preds / "000000.pfm"), "--dump-residual", str(res)]) == 0
    d, _ = data_io.read_disparity(preds / "000000.pfm")
    assert d.shape == (64, 64)
    assert data_io.read_pfm(res)[0].shape == (64, 64)
    assert main(["infer", "--ckpt", str(run / "final.ckpt"), "--left", str(left), "--right", str(right),
                 "--out", str(tmp_path / "x.png"), "--stage", "1"]) == 0
    assert data_io.read_kitti_disparity(tmp_path / "x.png")[0].shape == (64, 64)
    report = tmp_path / "eval.csv"
    assert main(["eval", "--pred", str(preds), "--gt", str(tmp_path / "gt"), "--out", str(report)]) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["method", "sample", "epe", "3pe", "valid_pixels", "seconds"]
    assert rows[-1][1] == "ALL"
    assert main(["report", str(report)]) == 0


def test_infer_sgm(tmp_path):
    s = data_io.synthesize_dataset(1, 1, preset="tiny")[0]
    data_io.save_sample(tmp_path, s)
    out = tmp_path / "sgm.pfm"
    assert main(["infer", "--method", "sgm", "--max-disp", "12", "--left", str(tmp_path / "left" / "000000.png"),
                 "--right", str(tmp_path / "right" / "000000.png"), "--out", str(out)]) == 0
    d, v = data_io.read_disparity(out)
    assert v.any() and np.abs(d - s.disparity)[v & s.valid].mean() < 1.0


def test_eval_unmatched_ids(tmp_path, capsys):
    for sub, ids in (("pred", ["a", "b"]), ("gt", ["a", "c"])):
        (tmp_path / sub).mkdir()
        for i in ids:
            data_io.write_pfm(tmp_path / sub / f"{i}.pfm", np.zeros((2, 2), np.float32))
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")]) == 2
    err = capsys.readouterr().err
    assert "b" in err and "c" in err


def test_gradcheck_subset_and_failure(capsys):
    assert main(["gradcheck", "--ops", "add,leaky_relu"]) == 0
    assert "pass" in capsys.readouterr().out
    assert main(["gradcheck", "--ops", "conv2d", "--tol", "1e-30"]) == 1
    assert "worst: conv2d" in capsys.readouterr().out
    assert main(["gradcheck", "--ops", "nope"]) == 2


def test_screen(tmp_path, capsys):
    d = np.zeros((10, 10), np.float32)
    data_io.write_pfm(tmp_path / "keep.pfm", d)
    d[:3] = 400
    data_io.write_pfm(tmp_path / "drop.pfm", d)
    assert main(["screen", "--gt", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "kept 1 removed 1" in out and "removed drop" in out


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
