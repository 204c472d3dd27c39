"""Glue between a RunConfig and the library: data, training, evaluation, calibration."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig
from .inference import (
    TilingSpec,
    calibrate_temperature_sweep,
    evaluate,
    finetune_temperatures,
    full_res_objective,
)
from .synth import flow_dataset, flow_tensors, seg_dataset, seg_tensors
from .train import TrainResult, train_run


def build_data(cfg: RunConfig):
    """``(train, val)`` stacked tensors generated from the data section."""
    d = cfg.data
    if cfg.run.task == "segmentation":
        train = seg_tensors(seg_dataset(d.n_train, d.resolution, d.k_classes, d.seed))
        val = seg_tensors(seg_dataset(d.n_val, d.resolution, d.k_classes, d.seed + 1))
    else:
        train = flow_tensors(flow_dataset(d.n_train, d.resolution, d.max_disp, d.seed))
        val = flow_tensors(flow_dataset(d.n_val, d.resolution, d.max_disp, d.seed + 1))
    return train, val


def write_run_files(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.cfg")
    (run_dir / "VERSION").write_text(f"winwin {__version__}\n")


def train_from_config(cfg: RunConfig, data=None, run_dir: Path | None = None) -> TrainResult:
    train, val = build_data(cfg) if data is None else data
    if run_dir is not None:
        write_run_files(cfg, run_dir)
    return train_run(cfg.train_config(), cfg.model_config(), train, val, run_dir)


def crop_pixels(cfg: RunConfig) -> tuple[int, int]:
    """Single-crop training size in pixels, (H, W)."""
    w, h = cfg.train.crop_shape
    p = cfg.model.patch_size
    return h * p, w * p


def eval_kwargs(cfg: RunConfig) -> dict:
    e = cfg.eval
    if e.strategy == "resize":
        res = e.train_res if all(e.train_res) else crop_pixels(cfg)
        return {"strategy": "resize", "train_res": tuple(res)}
    if e.strategy == "tiling":
        crop = e.tile_crop if all(e.tile_crop) else crop_pixels(cfg)
        return {"strategy": "tiling", "tiling": TilingSpec(tuple(crop), e.overlap)}
    return {"strategy": e.strategy}


def calibrate(cfg: RunConfig, model, train_data):
    """Uniform-temperature sweep, then optional per-head finetuning.

    Returns ``(tau table, sweep result, finetune history)``.
    """
    e = cfg.eval
    subset = tuple(t[: e.calib_subset] for t in train_data)
    objective = full_res_objective(model, subset)
    sweep = calibrate_temperature_sweep(model, objective, e.sweep_lo, e.sweep_hi, e.sweep_step)
    tau = torch.full_like(model.tau, sweep.best_tau)
    history = []
    if e.finetune_steps > 0:
        tau, history = finetune_temperatures(model, objective, e.finetune_steps, e.finetune_lr, init=tau)
    return tau, sweep, history


def evaluate_config(cfg: RunConfig, model, val_data, tau=None) -> float:
    return float(evaluate(model, val_data, tau=tau, **eval_kwargs(cfg)))


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """``with_overrides(cfg, train={'epochs': 2})`` style structured copy."""
    kw = {}
    for name, changes in sections.items():
        kw[name] = dataclasses.replace(getattr(cfg, name), **changes)
    return dataclasses.replace(cfg, **kw)
