"""Training loop for both tasks, its baselines, and multi-seed variance runs."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .errors import EmptyMask, InvalidSpec, TrainingDiverged
from .flowguide import BinocularSamplerSpec, FlowField, sample_pair
from .geometry import SamplerSpec, TokenGrid, WindowSet, sample
from .inference import evaluate
from .losses import cross_entropy_loss, laplacian_flow_loss
from .model import ModelConfig, WinWinModel, build_model
from .optim import AdamWConfig, OptimizerState, adamw_step, layer_decay_scales, lr_at

METRICS_HEADER = ["epoch", "step", "lr", "train_loss", "val_metric", "seconds"]
MODES = ("winwin", "single_crop", "full_res")


@dataclass
class TrainConfig:
    task: str = "segmentation"
    mode: str = "winwin"
    sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec.windows(2, 6, 6))
    binocular: BinocularSamplerSpec = field(default_factory=BinocularSamplerSpec)
    crop_shape: tuple[int, int] = (9, 8)  # (w, h) tokens for single_crop
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    min_lr: float = 1e-6
    lr_layer_decay: float | None = None
    seed: int = 0
    val_every: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidSpec(f"unknown mode {self.mode!r}")
        if self.task not in ("segmentation", "flow"):
            raise InvalidSpec(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidSpec("epochs and batch_size must be positive")
        if not (self.base_lr > 0 and self.min_lr >= 0 and self.weight_decay >= 0):
            raise InvalidSpec("learning rates must be positive and weight decay non-negative")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidSpec("warmup_epochs must be in [0, epochs)")
        if self.lr_layer_decay is not None and not 0 < self.lr_layer_decay <= 1:
            raise InvalidSpec("lr_layer_decay must be in (0, 1]")

    def monocular_spec(self) -> SamplerSpec:
        if self.mode == "full_res":
            return SamplerSpec.full()
        if self.mode == "single_crop":
            return SamplerSpec.crop(*self.crop_shape)
        return self.sampler

    def binocular_spec(self) -> BinocularSamplerSpec:
        if self.mode == "winwin":
            return self.binocular
        return BinocularSamplerSpec(second_mode="same", first=self.monocular_spec())


@dataclass
class TrainResult:
    model: WinWinModel
    history: list[dict]
    checkpoint: Path | None = None

    @property
    def final_metric(self) -> float:
        vals = [h["val_metric"] for h in self.history if h["val_metric"] is not None]
        return vals[-1] if vals else float("nan")


def _draw_visible(cfg: TrainConfig, grid: TokenGrid, flow: FlowField | None, rng):
    if cfg.task == "segmentation":
        return sample(grid, cfg.monocular_spec(), rng), None
    return sample_pair(flow, cfg.binocular_spec(), grid, grid, rng)


def batch_loss(model: WinWinModel, cfg: TrainConfig, data, idx: np.ndarray, rng) -> tuple[torch.Tensor, int]:
    """Mean loss over every supervised pixel of the batch ``idx``.

    Each element draws its own visible set; elements with equal token counts
    run together. Returns ``(loss, supervised pixel count)``.
    """
    h, w = data[0].shape[-2:]
    grid = TokenGrid.from_pixels(h, w, model.cfg.patch_size)
    groups: dict[tuple, list] = {}
    for i in idx:
        flow = None
        if cfg.task == "flow":
            gt, valid = data[2][i].numpy().astype(np.float64), data[3][i].numpy()
            flow = FlowField(gt[..., 0], gt[..., 1], valid)
        v1, v2 = _draw_visible(cfg, grid, flow, rng)
        key = (v1.n_tokens, v2.n_tokens if v2 is not None else 0)
        groups.setdefault(key, []).append((int(i), v1, v2))

    total, count = 0.0, 0
    for key in sorted(groups):
        items = groups[key]
        sel = torch.as_tensor([i for i, _, _ in items])
        vis1 = [v for _, v, _ in items]
        if cfg.task == "segmentation":
            pred, pix, owner = model(data[0][sel], vis1)
            labels = data[1][sel].flatten(1)[owner, pix]
            n = labels.numel()
            total = total + cross_entropy_loss(pred, labels) * n
        else:
            vis2 = [v for _, _, v in items]
            pred, pix, owner = model(data[0][sel], vis1, data[1][sel], vis2)
            gt = data[2][sel].flatten(1, 2)[owner, pix].to(pred.dtype)
            valid = data[3][sel].flatten(1)[owner, pix]
            n = int(valid.sum())
            if n == 0:
                continue
            total = total + laplacian_flow_loss(pred[:, :2], pred[:, 2], gt, valid) * n
        count += n
    if count == 0:
        raise EmptyMask("batch has no supervised pixel")
    return total / count, count


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_HEADER)
        for row in history:
            vm = row["val_metric"]
            wr.writerow([
                row["epoch"], row["step"], repr(row["lr"]), repr(row["train_loss"]),
                "" if vm is None else repr(vm), f"{row['seconds']:.3f}",
            ])


def train_run(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data,
    val_data=None,
    run_dir: str | Path | None = None,
    model: WinWinModel | None = None,
    step_callback=None,
) -> TrainResult:
    """Train from scratch (or from ``model``) and return the model and per-epoch log.

    ``train_data`` is ``(images, labels)`` for segmentation or
    ``(frame1, frame2, flow (N,H,W,2), valid)`` for flow. With ``run_dir`` the
    metrics CSV and the final checkpoint are written there.
    """
    cfg.validate()
    if model_cfg.task != cfg.task:
        raise InvalidSpec(f"model task {model_cfg.task} vs train task {cfg.task}")
    model = build_model(model_cfg, cfg.seed) if model is None else model
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    n = train_data[0].shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    order_rng = np.random.default_rng([cfg.seed, 0])
    window_rng = np.random.default_rng([cfg.seed, 1])

    params = {k: p for k, p in model.named_parameters() if p.requires_grad}
    decay = {k: p.ndim >= 2 for k, p in params.items()}
    scales = None
    if cfg.lr_layer_decay is not None:
        scales = layer_decay_scales(params, model_cfg.n_encoder_blocks, cfg.lr_layer_decay)
    opt_cfg = AdamWConfig(tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    state = OptimizerState()

    history: list[dict] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        perm = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, _ = batch_loss(model, cfg, train_data, idx, window_rng)
            if not torch.isfinite(loss):
                if run_dir is not None:
                    save_checkpoint(run_dir / "diverged.ckpt", model, {"step": step, "epoch": epoch})
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            step += 1
            lr = lr_at(step, total_steps, warmup, cfg.base_lr, cfg.min_lr)
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr, opt_cfg, scales, decay)
            losses.append(loss.item())
            if step_callback is not None:
                step_callback(step, losses[-1])
        val = None
        if val_data is not None and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            model.eval()
            val = float(evaluate(model, val_data))
        history.append({
            "epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(losses)),
            "val_metric": val, "seconds": time.perf_counter() - start,
        })
        if run_dir is not None:
            _write_metrics(run_dir / "metrics.csv", history)

    model.eval()
    ckpt = None
    if run_dir is not None:
        ckpt = save_checkpoint(run_dir / "model.ckpt", model, {"seed": cfg.seed, "mode": cfg.mode})
    return TrainResult(model, history, ckpt)


@dataclass
class MultiSeedResult:
    mean: float
    std: float  # sample standard deviation (n - 1 denominator)
    per_seed: list[float]
    results: list[TrainResult] = field(default_factory=list, repr=False)

    def to_csv(self) -> str:
        lines = ["seed,metric"] + [f"{i},{v!r}" for i, v in enumerate(self.per_seed)]
        lines += [f"mean,{self.mean!r}", f"std,{self.std!r}"]
        return "\n".join(lines) + "\n"


def summarize(values) -> tuple[float, float]:
    values = [float(v) for v in values]
    if len(values) < 2:
        raise InvalidSpec("need at least two values for a spread")
    return statistics.mean(values), statistics.stdev(values)


def multi_seed(cfg: TrainConfig, model_cfg: ModelConfig, train_data, val_data, n_seeds: int = 3,
               seeds=None, run_dir: str | Path | None = None) -> MultiSeedResult:
    """Run ``train_run`` for seeds ``0..n-1`` (or ``seeds``) and report mean and std."""
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    if len(seeds) < 2:
        raise InvalidSpec("multi_seed needs at least two seeds")
    results = []
    for i, s in enumerate(seeds):
        sub = None if run_dir is None else Path(run_dir) / f"seed{i}"
        c = replace(cfg, seed=s)
        results.append(train_run(c, model_cfg, train_data, val_data, sub))
    metrics = [r.final_metric for r in results]
    mean, std = summarize(metrics)
    out = MultiSeedResult(mean, std, metrics, results)
    if run_dir is not None:
        (Path(run_dir) / "seeds.csv").write_text(out.to_csv())
    return out
