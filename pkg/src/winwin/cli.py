"""Command line entry point: ``winwin <command> [options]``.

Every command exits 0 on success; on a bad config, infeasible sampler or
shape error it prints a one-line diagnostic to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .ablation import ablation_grid
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import WinWinError
from .flowguide import bin_flow_endpoints, render_bins_ascii, sample_pair
from .geometry import TokenGrid, render_ascii, sample
from .inference import evaluate, evaluate_flow, robustness_csv, robustness_sweep
from .metrics import MetricReport
from .pipeline import (
    build_data,
    calibrate,
    eval_kwargs,
    evaluate_config,
    train_from_config,
    write_run_files,
)
from .synth import flow_dataset, gen_flow_sample, seg_dataset, write_dataset
from .train import multi_seed


def _load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "strategy", None):
        overrides.append(f"eval.strategy={args.strategy}")
    if getattr(args, "overlap", None) is not None:
        overrides.append(f"eval.overlap={args.overlap}")
    return RunConfig.from_text(text, overrides)


def _load_model(args, cfg: RunConfig):
    path = Path(args.checkpoint) if args.checkpoint else cfg.run_dir() / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    out = Path(args.out)
    if cfg.run.task == "segmentation":
        train = seg_dataset(d.n_train, d.resolution, d.k_classes, d.seed)
        val = seg_dataset(d.n_val, d.resolution, d.k_classes, d.seed + 1)
    else:
        train = flow_dataset(d.n_train, d.resolution, d.max_disp, d.seed)
        val = flow_dataset(d.n_val, d.resolution, d.max_disp, d.seed + 1)
    write_dataset(train, out / "train")
    write_dataset(val, out / "val")
    print(f"wrote {len(train)} train and {len(val)} val samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = cfg.run_dir()
    if args.seeds and args.seeds > 1:
        train, val = build_data(cfg)
        write_run_files(cfg, run_dir)
        res = multi_seed(cfg.train_config(), cfg.model_config(), train, val,
                         seeds=[cfg.run.seed + i for i in range(args.seeds)], run_dir=run_dir)
        print(f"mean={res.mean!r} std={res.std!r} ({run_dir / 'seeds.csv'})")
        return 0
    res = train_from_config(cfg, run_dir=run_dir)
    print(f"val_metric={res.final_metric!r} checkpoint={res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _load_model(args, cfg)
    _, val = build_data(cfg)
    kw = eval_kwargs(cfg)
    if cfg.run.task == "flow":
        report = evaluate_flow(model, *val, **kw)
    else:
        report = MetricReport({"miou": evaluate(model, val, **kw)})
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_csv(), end="")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    model = _load_model(args, cfg)
    train, val = build_data(cfg)
    before = evaluate_config(cfg, model, val)
    tau, sweep, history = calibrate(cfg, model, train)
    after = evaluate_config(cfg, model, val, tau)
    out = Path(args.out) if args.out else cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep.to_csv())
    if history:
        (out / "finetune.csv").write_text(
            "step,objective\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))
    with torch.no_grad():
        model.tau.copy_(tau)
    save_checkpoint(out / "calibrated.ckpt", model, {"tau_multiplier": sweep.best_tau})
    print(f"best_tau={sweep.best_tau!r} metric_before={before!r} metric_after={after!r}")
    return 0


def _parse_grid(text: str) -> dict[str, list[str]]:
    """``"windows=1,2,4;strategy=full,winwin"`` -> ordered axes."""
    axes = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ValueError(f"grid axis {part!r}: expected key=v1,v2")
        key, values = part.split("=", 1)
        axes[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    return axes


def cmd_sweep_ablation(args) -> int:
    cfg = _load_config(args)
    axes = _parse_grid(args.grid or "")
    seeds = [cfg.run.seed + i for i in range(args.seeds)] if args.seeds else None
    out = Path(args.out) if args.out else cfg.run_dir()
    path = ablation_grid(cfg, axes, out, seeds)
    print(path.read_text(), end="")
    return 0


def cmd_robustness(args) -> int:
    cfg = _load_config(args)
    model = _load_model(args, cfg)
    _, val = build_data(cfg)
    res = []
    for r in args.resolutions.split(","):
        h, _, w = r.partition("x")
        res.append((int(h), int(w or h)))
    rows = robustness_sweep(model, val, res, seed=cfg.run.seed, crops_per_image=args.crops)
    text = robustness_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_sample_windows(args) -> int:
    """Segmentation: one WindowSet. Flow: frame-1 windows, endpoint bins, frame-2 windows."""
    cfg = _load_config(args)
    if cfg.run.task == "flow":
        h, w = cfg.data.resolution
        grid = TokenGrid.from_pixels(h, w, cfg.model.patch_size)
        fs = gen_flow_sample((h, w), cfg.data.max_disp, cfg.run.seed)
        flow = fs.flow
        spec = cfg.binocular_spec()
        spec.validate(grid, grid)
        ws1, ws2 = sample_pair(flow, spec, grid, grid, cfg.run.seed)
        bins = bin_flow_endpoints(flow, ws1, grid, grid)
        for title, body in [("frame1", ws1.to_text() + render_ascii(ws1, grid)),
                            ("bins", render_bins_ascii(bins)),
                            ("frame2", ws2.to_text() + render_ascii(ws2, grid))]:
            print(f"# {title}\n{body}", end="")
        return 0
    w, _, h = args.grid_size.partition("x")
    grid = TokenGrid(int(w), int(h or w))
    cfg.sampler.validate(grid)
    ws = sample(grid, cfg.sampler, cfg.run.seed)
    print(ws.to_text(), end="")
    print(render_ascii(ws, grid), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="winwin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic train/val datasets")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train one model (or several seeds)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")

    for name, fn, help_ in [("eval", cmd_eval, "evaluate a checkpoint"),
                            ("calibrate", cmd_calibrate, "fit attention temperatures")]:
        p = add(name, fn, help_)
        p.add_argument("--checkpoint")
        p.add_argument("--strategy", choices=["direct", "resize", "tiling"])
        p.add_argument("--overlap", type=float)
        p.add_argument("--out")

    p = add("sweep-ablation", cmd_sweep_ablation, "train and evaluate a grid of variants")
    p.add_argument("--grid", help="axes such as 'windows=1,2,4;strategy=full,winwin'")
    p.add_argument("--seeds", type=int, default=0)
    p.add_argument("--out")

    p = add("robustness", cmd_robustness, "metric on random crops of several resolutions")
    p.add_argument("--checkpoint")
    p.add_argument("--resolutions", required=True, help="comma list such as 64x64,96x96")
    p.add_argument("--crops", type=int, default=1, help="crops per image")
    p.add_argument("--out")

    p = add("sample-windows", cmd_sample_windows, "draw and print one visible token set")
    p.add_argument("--grid", dest="grid_size", default="16x16", help="token grid WxH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (WinWinError, ValueError, FileNotFoundError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"winwin {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
