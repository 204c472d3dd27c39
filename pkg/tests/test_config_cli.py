from __future__ import annotations

import subprocess
import sys

import pytest
import torch
from conftest import TINY_SEG

from winwin import __version__
from winwin.checkpoint import load_checkpoint
from winwin.cli import main
from winwin.config import RunConfig, format_value, parse_value
from winwin.errors import InvalidSpec
from winwin.geometry import SamplerSpec
from winwin.inference import TilingSpec, evaluate
from winwin.pipeline import build_data

# -- config ---------------------------------------------------------------------


def test_default_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_round_trip_with_changes():
    cfg = RunConfig.from_text(TINY_SEG, ["train.lr_layer_decay=0.75", "eval.calibrate=true",
                                         "sampler.budget_range=900,1100"])
    assert cfg.train.lr_layer_decay == 0.75 and cfg.eval.calibrate is True
    assert cfg.sampler.budget_range == (900, 1100)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_comments_blank_lines_and_order():
    cfg = RunConfig.from_text("# header\n\nrun.seed = 4  # trailing\n", ["run.seed=9"])
    assert cfg.run.seed == 9


def test_derived_views():
    cfg = RunConfig.from_text(TINY_SEG, ["run.seed=5"])
    tc = cfg.train_config()
    assert tc.seed == 5 and tc.task == "segmentation" and tc.sampler == SamplerSpec.windows(2, 3, 3)
    assert cfg.model_config().n_classes == 4
    flag = RunConfig.from_text("binocular.first_from_sampler = true\nsampler.n_windows = 3\n")
    assert flag.binocular_spec().first == flag.sampler


@pytest.mark.parametrize("text", ["run.seed = x", "model.embed_dim", "nosection.key = 1", "model.task = flow",
                                  "model.bogus = 1", "train.betas = 0.9", "eval.calibrate = maybe",
                                  "model.embed_dim = 30"])
def test_parse_errors(text):
    with pytest.raises(InvalidSpec):
        RunConfig.from_text(text)


def test_error_names_key():
    with pytest.raises(InvalidSpec, match="train.epochs"):
        RunConfig.from_text("train.epochs = many")


def test_value_codec():
    assert format_value((1, 2)) == "1,2" and format_value(None) == "none" and format_value(True) == "true"
    assert parse_value("none", float | None) is None
    assert parse_value("0.5", float | None) == 0.5
    assert parse_value("3,4", tuple[int, int]) == (3, 4)


def test_run_root_override(monkeypatch, tmp_path):
    cfg = RunConfig.from_text("run.name = abc\nrun.root = elsewhere\n")
    monkeypatch.delenv("WINWIN_RUN_ROOT", raising=False)
    assert str(cfg.run_dir()) == "elsewhere/abc"
    monkeypatch.setenv("WINWIN_RUN_ROOT", str(tmp_path))
    assert cfg.run_dir() == tmp_path / "abc"


# -- CLI -------------------------------------------------------------------------


def test_train_writes_self_describing_run(run_root, tiny_seg_cfg, capsys):
    assert main(["train", "--config", str(tiny_seg_cfg)]) == 0
    run = run_root / "tiny"
    assert {"config.cfg", "VERSION", "metrics.csv", "model.ckpt"} <= {p.name for p in run.iterdir()}
    assert (run / "VERSION").read_text().strip() == f"winwin {__version__}"
    assert RunConfig.load(run / "config.cfg") == RunConfig.from_text(TINY_SEG)
    assert "val_metric=" in capsys.readouterr().out


def test_eval_matches_library(run_root, tiny_seg_cfg, capsys):
    main(["train", "--config", str(tiny_seg_cfg)])
    capsys.readouterr()
    cfg = RunConfig.from_text(TINY_SEG)
    model, _ = load_checkpoint(run_root / "tiny" / "model.ckpt")
    _, val = build_data(cfg)
    assert main(["eval", "--config", str(tiny_seg_cfg)]) == 0
    direct = float(capsys.readouterr().out.splitlines()[1].split(",")[1])
    assert direct == float(evaluate(model, val))
    out = run_root / "tiled.csv"
    assert main(["eval", "--config", str(tiny_seg_cfg), "--strategy", "tiling", "--overlap", "0.5",
                 "--set", "eval.tile_crop=16,16", "--out", str(out)]) == 0
    tiled = float(out.read_text().splitlines()[1].split(",")[1])
    assert tiled == float(evaluate(model, val, strategy="tiling", tiling=TilingSpec((16, 16), 0.5)))


def test_train_multiple_seeds(run_root, tiny_seg_cfg, capsys):
    assert main(["train", "--config", str(tiny_seg_cfg), "--seeds", "2"]) == 0
    assert (run_root / "tiny" / "seeds.csv").read_text().startswith("seed,metric\n")
    assert "mean=" in capsys.readouterr().out


def test_calibrate(run_root, tiny_seg_cfg, capsys):
    main(["train", "--config", str(tiny_seg_cfg)])
    capsys.readouterr()
    args = ["calibrate", "--config", str(tiny_seg_cfg), "--set", "eval.sweep_step=0.2",
            "--set", "eval.finetune_steps=2"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert out.startswith("best_tau=") and "metric_after=" in out
    run = run_root / "tiny"
    assert (run / "sweep.csv").read_text().splitlines()[0] == "tau,objective"
    assert len((run / "sweep.csv").read_text().splitlines()) == 1 + 7  # 0.8 .. 2.0 step 0.2
    assert (run / "finetune.csv").read_text().splitlines()[0] == "step,objective"
    model, extra = load_checkpoint(run / "calibrated.ckpt")
    assert "tau_multiplier" in extra and model.tau.shape == (1, 2)


def test_gen_data(tmp_path, tiny_seg_cfg, capsys):
    assert main(["gen-data", "--config", str(tiny_seg_cfg), "--out", str(tmp_path / "d")]) == 0
    assert len((tmp_path / "d" / "train" / "index.csv").read_text().splitlines()) == 1 + 8
    assert len((tmp_path / "d" / "val" / "index.csv").read_text().splitlines()) == 1 + 4


def test_robustness(run_root, tiny_seg_cfg, capsys):
    main(["train", "--config", str(tiny_seg_cfg)])
    capsys.readouterr()
    assert main(["robustness", "--config", str(tiny_seg_cfg), "--resolutions", "32x32,16x24", "--crops", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "resolution,metric" and [l.split(",")[0] for l in lines[1:]] == ["32x32", "16x24"]


def test_sample_windows_seg(capsys):
    assert main(["sample-windows", "--set", "sampler.window_shape=3,2", "--grid", "8x6", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in lines[:2]] == ["win", "win"]
    assert [len(l) for l in lines[2:]] == [8] * 6
    grid = "".join(lines[2:])
    assert grid.count("A") == grid.count("B") == 6


def test_sample_windows_flow(tiny_flow_cfg, capsys):
    assert main(["sample-windows", "--config", str(tiny_flow_cfg)]) == 0
    out = capsys.readouterr().out
    assert "# frame1" in out and "# bins" in out and "# frame2" in out


def test_flow_train_and_eval(run_root, tiny_flow_cfg, capsys):
    assert main(["train", "--config", str(tiny_flow_cfg)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(tiny_flow_cfg)]) == 0
    names = [l.split(",")[0] for l in capsys.readouterr().out.splitlines()]
    assert names[:3] == ["metric", "epe", "outlier_1px"]


@pytest.mark.parametrize("argv", [
    ["sample-windows", "--set", "sampler.window_shape=40,40", "--grid", "8x8"],
    ["sample-windows", "--set", "model.nope=1"],
    ["eval", "--checkpoint", "/nonexistent/model.ckpt"],
    ["sweep-ablation", "--grid", "windows"],
])
def test_errors_exit_nonzero_with_one_line(argv, capsys):
    assert main(argv) != 0
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith(f"winwin {argv[0]}: error: ")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "winwin", "sample-windows", "--set", "sampler.n_windows=9",
                           "--grid", "4x4"], capture_output=True, text=True)
    assert proc.returncode != 0 and proc.stderr.count("\n") == 1 and proc.stdout == ""
    assert torch.__version__  # the package imports in a fresh interpreter
