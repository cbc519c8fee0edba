import numpy as np
import pandas as pd
import pytest

import cli
from ebt.datapipe import read_gray, write_gray
from ebt.regions import TriClassMask
from ebt.toymodel import load_weights

SMALL = ["--size", "32", "--quiet"]


def _run(args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def gt_file(tmp_path, center_edge):
    path = tmp_path / "gt.png"
    write_gray(center_edge * 255, path)
    return path


class TestRegions:
    def test_counts_and_weights(self, gt_file, capsys):
        assert _run(["regions", "--gt", gt_file, "--r", 1]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "counts: E=1 B=8 T=0 (r=1)"
        assert out[1] == "weights: w_e=0.888889 w_b=0.111111 w_t=1.000000"

    def test_visualization_file(self, gt_file, tmp_path):
        out = tmp_path / "vis" / "mask.png"
        assert _run(["regions", "--gt", gt_file, "--r", 1, "--out", out]) == 0
        levels = read_gray(out)
        assert levels[1, 1] == 255 and levels[0, 0] == 128
        assert TriClassMask.from_levels(levels, 1).counts() == (1, 8, 0)

    def test_config_file_and_flag_precedence(self, gt_file, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# radius only\nr=0\n")
        assert _run(["regions", "--gt", gt_file, "--config", cfg]) == 0
        assert capsys.readouterr().out.startswith("counts: E=1 B=0 T=8 (r=0)")
        assert _run(["regions", "--gt", gt_file, "--config", cfg, "--r", 1]) == 0
        assert capsys.readouterr().out.startswith("counts: E=1 B=8 T=0 (r=1)")

    def test_unknown_config_key(self, gt_file, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("radius=3\n")
        assert _run(["regions", "--gt", gt_file, "--config", cfg]) == 2
        assert "error:" in capsys.readouterr().err

    def test_config_with_small_canvas_size(self, gt_file, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("size=8\nr=1\n")
        assert _run(["regions", "--gt", gt_file, "--config", cfg]) == 0
        assert capsys.readouterr().out.startswith("counts: E=1 B=8 T=0 (r=1)")

    def test_missing_gt_file(self, tmp_path):
        assert _run(["regions", "--gt", tmp_path / "absent.png"]) == 1


def test_loss_command(tmp_path, gt_file, capsys):
    pred = tmp_path / "pred.png"
    write_gray(np.full((3, 3), 128), pred)
    assert _run(["loss", "--pred", pred, "--gt", gt_file, "--r", 1]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("=")[0] for line in lines] == ["bce", "wbce", "ebt"]


class TestEval:
    def test_perfect_predictions(self, tmp_path, rng, capsys):
        for i in range(3):
            gt = (rng.random((20, 20)) < 0.1).astype(np.uint8) * 255
            gt[4, 4] = 255
            write_gray(gt, tmp_path / "gt" / f"im{i}.png")
            write_gray(gt, tmp_path / "pred" / f"im{i}.png")
        report = tmp_path / "report" / "eval.csv"
        code = _run(["eval", "--pred-dir", tmp_path / "pred", "--gt-dir", tmp_path / "gt", "--out", report, "--quiet"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "ODS=1.000000 OIS=1.000000 AP=1.000000"
        assert report.read_text().splitlines()[-1].startswith("# ods=1.000000")

    def test_empty_prediction_dir(self, tmp_path, capsys):
        (tmp_path / "pred").mkdir()
        (tmp_path / "gt").mkdir()
        assert _run(["eval", "--pred-dir", tmp_path / "pred", "--gt-dir", tmp_path / "gt"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_mismatched_stems(self, tmp_path, capsys):
        write_gray(np.zeros((4, 4)), tmp_path / "pred" / "a.png")
        write_gray(np.zeros((4, 4)), tmp_path / "gt" / "b.png")
        assert _run(["eval", "--pred-dir", tmp_path / "pred", "--gt-dir", tmp_path / "gt", "--quiet"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_thresholds(self, tmp_path):
        (tmp_path / "pred").mkdir()
        (tmp_path / "gt").mkdir()
        code = _run(["eval", "--pred-dir", tmp_path / "pred", "--gt-dir", tmp_path / "gt", "--thresholds", "0.6,0.2"])
        assert code == 2


def test_train_writes_loss_curve_and_weights(tmp_path):
    out = tmp_path / "run"
    code = _run(["train", "--loss", "wbce", "--count", 3, "--epochs", 2, "--lr", 1e-2, "--out", out] + SMALL)
    assert code == 0
    frame = pd.read_csv(out / "train_wbce.csv")
    assert frame["epoch"].tolist() == [1, 2]
    assert load_weights(str(out / "weights_wbce.txt")).w.shape == (8,)


def test_train_rejects_unknown_loss_in_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("loss=focal\n")
    assert _run(["train", "--config", cfg, "--out", tmp_path / "run"] + SMALL) == 2


def test_train_with_automatic_crop(tmp_path):
    out = tmp_path / "run"
    code = _run(["train", "--count", 2, "--epochs", 2, "--lr", 1e-2, "--crop", "auto", "--size", 64,
                 "--quiet", "--out", out])
    assert code == 0
    assert len(pd.read_csv(out / "train_ebt.csv")) == 2


def test_train_rejects_bad_crop(tmp_path):
    assert _run(["train", "--crop", "wide", "--out", tmp_path / "run"] + SMALL) == 2


def test_train_needs_out(tmp_path):
    assert _run(["train", "--count", 2, "--epochs", 1] + SMALL) == 2


def test_single_cell_sweep_matches_file_pipeline(tmp_path):
    seed, count, eval_count = 5, 4, 2
    shared = ["--seed", seed, "--epochs", 3, "--lr", 1e-2] + SMALL

    assert _run(["synth", "--seed", seed, "--count", count, "--out", tmp_path / "train"] + SMALL) == 0
    assert _run(["synth", "--seed", seed + count, "--count", eval_count, "--out", tmp_path / "test"] + SMALL) == 0
    assert _run(["train", "--data", tmp_path / "train", "--b-b", 0.6, "--b-t", 0.3,
                 "--out", tmp_path / "model"] + shared) == 0
    assert _run(["infer", "--weights", tmp_path / "model" / "weights_ebt.txt",
                 "--image-dir", tmp_path / "test" / "images", "--out", tmp_path / "model", "--quiet"]) == 0
    assert _run(["eval", "--pred-dir", tmp_path / "model" / "pred", "--gt-dir", tmp_path / "test" / "edges",
                 "--out", tmp_path / "eval.csv", "--quiet"]) == 0

    assert _run(["sweep", "--count", count, "--eval-count", eval_count, "--grid-b-b", 0.6, "--grid-b-t", 0.3,
                 "--out", tmp_path / "sweep"] + shared) == 0

    sweep = pd.read_csv(tmp_path / "sweep" / "sweep.csv")
    assert len(sweep) == 1
    summary = tmp_path.joinpath("eval.csv").read_text().splitlines()[-1]
    values = dict(item.split("=") for item in summary[2:].split(","))
    assert f"{sweep['ods'][0]:.6f}" == values["ods"]
    assert f"{sweep['ois'][0]:.6f}" == values["ois"]
    assert f"{sweep['ap'][0]:.6f}" == values["ap"]


def test_full_grid_sweep(tmp_path, capsys):
    args = ["sweep", "--count", 3, "--eval-count", 2, "--epochs", 2, "--lr", 1e-2, "--thresholds", 9] + SMALL
    assert _run(args + ["--out", tmp_path / "a"]) == 0
    assert "25 configurations" in capsys.readouterr().out
    frame = pd.read_csv(tmp_path / "a" / "sweep.csv")
    assert list(frame.columns) == ["b_e", "b_b", "b_t", "ods", "ois", "ap"]
    assert len(frame) == 25
    assert frame[["ods", "ois", "ap"]].apply(lambda col: col.between(0.0, 1.0).all()).all()
    assert sorted(set(frame["b_b"])) == [0.4, 0.6, 0.8, 1.0, 1.2]

    assert _run(args + ["--out", tmp_path / "b"]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_gradcheck_passes(capsys):
    assert _run(["gradcheck", "--size", 6, "--r", 2, "--quiet"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_default_size(capsys):
    assert _run(["gradcheck", "--quiet"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_synth_writes_dataset(tmp_path):
    assert _run(["synth", "--count", 2, "--out", tmp_path / "data"] + SMALL) == 0
    assert sorted(p.name for p in (tmp_path / "data" / "images").iterdir()) == ["synth_00042.png", "synth_00043.png"]
    assert read_gray(tmp_path / "data" / "edges" / "synth_00042.png").shape == (32, 32)
