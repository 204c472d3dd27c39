"""Ablation grids: cartesian products of config variations, one train + eval per cell."""

from __future__ import annotations

import csv
import itertools
import math
import traceback
from pathlib import Path

import numpy as np

from .config import RunConfig
from .geometry import SamplerSpec, TokenGrid
from .pipeline import build_data, calibrate, evaluate_config, train_from_config

ABLATION_HEADER = ["variant", "tokens", "metric_no_temp", "metric_temp", "status"]

# train/test setups compared against each other
STRATEGIES = {
    "full": {"train.mode": "full_res", "eval.strategy": "direct"},
    "crop": {"train.mode": "single_crop", "eval.strategy": "direct"},
    "crop+resize": {"train.mode": "single_crop", "eval.strategy": "resize"},
    "crop+tiling": {"train.mode": "single_crop", "eval.strategy": "tiling"},
    "winwin": {"train.mode": "winwin", "eval.strategy": "direct"},
}


def windows_at_budget(n: int, budget: int) -> SamplerSpec:
    """``n`` equal square windows whose total area is closest to ``budget``."""
    side = max(1, int(round(math.sqrt(budget / n))))
    return SamplerSpec.windows(n, side, side)


def apply_cell(base: RunConfig, cell: dict[str, str]) -> RunConfig:
    """Apply one grid cell. Besides dotted config keys, two shorthands exist:

    ``windows=N`` keeps the base token budget with N square windows, and
    ``strategy=NAME`` selects a train/test setup from ``STRATEGIES``.
    """
    pairs = []
    for key, value in cell.items():
        if key == "windows":
            budget = base.sampler.token_budget(TokenGrid(10**6, 10**6))
            spec = windows_at_budget(int(value), budget)
            pairs += [("sampler.mode", "multi_window"), ("sampler.n_windows", str(spec.n_windows)),
                      ("sampler.window_shape", f"{spec.window_shape[0]},{spec.window_shape[1]}")]
        elif key == "strategy":
            if value not in STRATEGIES:
                raise ValueError(f"unknown strategy {value!r}; choose from {sorted(STRATEGIES)}")
            pairs += list(STRATEGIES[value].items())
        else:
            pairs.append((key, value))
    return base.with_values(pairs)


def visible_tokens(cfg: RunConfig) -> int:
    h, w = cfg.data.resolution
    grid = TokenGrid.from_pixels(h, w, cfg.model.patch_size)
    tc = cfg.train_config()
    if cfg.run.task == "flow":
        return tc.binocular_spec().first_spec().token_budget(grid)
    return tc.monocular_spec().token_budget(grid)


def cell_name(cell: dict[str, str]) -> str:
    return ";".join(f"{k}={v}" for k, v in cell.items()) or "base"


def ablation_grid(base: RunConfig, axes: dict[str, list[str]], out_dir, seeds=None) -> Path:
    """Train and evaluate every cell; write ``ablation.csv`` and return its path.

    Failing cells are recorded with ``status`` ``failed: <reason>`` and the
    grid continues. With ``seeds`` the metrics are means over those seeds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(axes)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
    seeds = [base.run.seed] if seeds is None else list(seeds)
    data_cache: dict = {}
    rows = []
    for i, cell in enumerate(cells):
        name = cell_name(cell)
        try:
            cfg = apply_cell(base, cell)
            key = (cfg.run.task, repr(cfg.data))
            if key not in data_cache:
                data_cache[key] = build_data(cfg)
            train, val = data_cache[key]
            plain, tempered = [], []
            for s in seeds:
                scfg = cfg.with_values([("run.seed", str(s))])
                res = train_from_config(scfg, (train, val), out_dir / f"cell{i:03d}" / f"seed{s}")
                plain.append(evaluate_config(scfg, res.model, val))
                if scfg.eval.calibrate:
                    tau, _, _ = calibrate(scfg, res.model, train)
                    tempered.append(evaluate_config(scfg, res.model, val, tau))
            rows.append([name, visible_tokens(cfg), repr(float(np.mean(plain))),
                         repr(float(np.mean(tempered))) if tempered else "", "ok"])
        except Exception as exc:  # a broken cell must not stop the grid
            reason = f"{type(exc).__name__}: {exc}".replace("\n", " ")
            (out_dir / f"cell{i:03d}.error").parent.mkdir(parents=True, exist_ok=True)
            (out_dir / f"cell{i:03d}.error").write_text(traceback.format_exc())
            rows.append([name, "", "", "", f"failed: {reason}"])
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        wr.writerows(rows)
    return path
