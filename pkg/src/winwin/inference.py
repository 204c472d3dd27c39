"""Test-time prediction strategies, temperature calibration, and evaluation loops."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidSpec, ShapeMismatch, TrainingDiverged
from .geometry import as_rng
from .losses import cross_entropy_loss
from .metrics import MetricReport, confusion_matrix, metric_epe
from .model import WinWinModel


@torch.no_grad()
def predict_full(model: WinWinModel, images, images2=None, tau=None, batch_size: int = 8) -> torch.Tensor:
    """One forward pass over every token; returns ``(B, out, H, W)``."""
    p = model.cfg.patch_size
    if images.shape[-1] % p or images.shape[-2] % p:
        raise ShapeMismatch(f"image {tuple(images.shape[-2:])} not divisible by patch {p}")
    outs = []
    for i in range(0, images.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        outs.append(model.predict_dense(images[sl], None if images2 is None else images2[sl], tau))
    return torch.cat(outs)


def _resize_flow(pred: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = pred.shape[-2:]
    out = F.interpolate(pred, size=size, mode="bilinear", align_corners=False)
    scale = torch.ones(pred.shape[1], dtype=pred.dtype)
    scale[0], scale[1] = size[1] / w, size[0] / h
    return out * scale.view(1, -1, 1, 1)


@torch.no_grad()
def predict_resize(model, images, train_res: tuple[int, int], images2=None, tau=None) -> torch.Tensor:
    """Downscale to ``train_res`` (H, W), predict, upscale back.

    Segmentation logits are upsampled bilinearly; flow (u, v) is additionally
    multiplied by the per-axis resolution ratio.
    """
    size = tuple(images.shape[-2:])
    train_res = tuple(train_res)
    if train_res == size:
        return predict_full(model, images, images2, tau)

    def down(x):
        return F.interpolate(x, size=train_res, mode="bilinear", align_corners=False)

    pred = predict_full(model, down(images), None if images2 is None else down(images2), tau)
    if model.cfg.task == "flow":
        return _resize_flow(pred, size)
    return F.interpolate(pred, size=size, mode="bilinear", align_corners=False)


@dataclass(frozen=True)
class TilingSpec:
    crop: tuple[int, int]  # (h, w) pixels
    overlap_ratio: float = 0.5

    def strides(self) -> tuple[int, int]:
        return tuple(int(c * (1 - self.overlap_ratio)) for c in self.crop)

    def validate(self, height: int, width: int) -> None:
        if not 0 <= self.overlap_ratio < 1:
            raise InvalidSpec("overlap_ratio must be in [0, 1)")
        if self.crop[0] > height or self.crop[1] > width:
            raise InvalidSpec(f"crop {self.crop} larger than image {height}x{width}")
        if min(self.strides()) < 1:
            raise InvalidSpec("tiling stride must be at least one pixel")


def tile_starts(size: int, crop: int, stride: int) -> list[int]:
    """Regular offsets with the last one snapped so the final crop ends at the edge."""
    starts = list(range(0, size - crop + 1, stride))
    if starts[-1] + crop < size:
        starts.append(size - crop)
    return starts


def tile_boxes(height: int, width: int, tiling: TilingSpec) -> list[tuple[int, int]]:
    tiling.validate(height, width)
    sy, sx = tiling.strides()
    ch, cw = tiling.crop
    return [(y, x) for y in tile_starts(height, ch, sy) for x in tile_starts(width, cw, sx)]


def tile_count_map(height: int, width: int, tiling: TilingSpec) -> np.ndarray:
    count = np.zeros((height, width), dtype=np.int64)
    ch, cw = tiling.crop
    for y, x in tile_boxes(height, width, tiling):
        count[y : y + ch, x : x + cw] += 1
    return count


@torch.no_grad()
def predict_tiled(model, images, tiling: TilingSpec, images2=None, tau=None):
    """Average predictions of overlapping crops; returns ``(pred, count map)``."""
    b, _, h, w = images.shape
    ch, cw = tiling.crop
    total = None
    count = torch.zeros(h, w, dtype=images.dtype)
    for y, x in tile_boxes(h, w, tiling):
        crop2 = None if images2 is None else images2[..., y : y + ch, x : x + cw]
        out = predict_full(model, images[..., y : y + ch, x : x + cw], crop2, tau)
        if total is None:
            total = out.new_zeros(b, out.shape[1], h, w)
        total[..., y : y + ch, x : x + cw] += out
        count[y : y + ch, x : x + cw] += 1
    return total / count, count


def predict(model, images, images2=None, strategy: str = "direct", tau=None,
            train_res=None, tiling: TilingSpec | None = None) -> torch.Tensor:
    if strategy == "direct":
        return predict_full(model, images, images2, tau)
    if strategy == "resize":
        return predict_resize(model, images, train_res, images2, tau)
    if strategy == "tiling":
        return predict_tiled(model, images, tiling, images2, tau)[0]
    raise InvalidSpec(f"unknown strategy {strategy!r}")


# -- evaluation --------------------------------------------------------------------


def evaluate_seg(model, images, labels, k: int, tau=None, **kw) -> float:
    """Dataset-level mIoU (one confusion matrix over all images)."""
    pred = predict(model, images, tau=tau, **kw).argmax(1)
    cm = confusion_matrix(pred.numpy(), labels.numpy(), k)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    return float(np.mean(tp[union > 0] / union[union > 0]))


def evaluate_flow(model, frame1, frame2, gt, valid, tau=None, **kw) -> MetricReport:
    pred = predict(model, frame1, frame2, tau=tau, **kw)
    uv = pred[:, :2].permute(0, 2, 3, 1).numpy()
    return metric_epe(uv, gt.numpy(), valid.numpy())


def evaluate(model, data, tau=None, **kw) -> float:
    """Headline metric for a stacked dataset: mIoU (segmentation) or EPE (flow)."""
    if model.cfg.task == "segmentation":
        images, labels = data
        return evaluate_seg(model, images, labels, model.cfg.n_classes, tau, **kw)
    return evaluate_flow(model, *data, tau=tau, **kw)["epe"]


# -- temperature calibration ---------------------------------------------------------


def full_res_objective(model: WinWinModel, data, batch_size: int = 8) -> Callable:
    """Training objective at full resolution as a function of the temperature table.

    Segmentation: mean cross-entropy over all pixels. Flow: mean EPE over valid
    pixels. The returned callable is differentiable with respect to ``tau``.
    """

    def objective(tau: torch.Tensor) -> torch.Tensor:
        total, n = 0.0, 0
        for i in range(0, data[0].shape[0], batch_size):
            sl = slice(i, i + batch_size)
            if model.cfg.task == "segmentation":
                images, labels = data[0][sl], data[1][sl]
                out = model.predict_dense(images, tau=tau)
                logits = out.permute(0, 2, 3, 1)
                total = total + cross_entropy_loss(logits, labels) * labels.numel()
                n += labels.numel()
            else:
                f1, f2, gt, valid = (d[sl] for d in data)
                out = model.predict_dense(f1, f2, tau=tau)
                err = out[:, :2].permute(0, 2, 3, 1) - gt.to(out.dtype)
                # tiny floor keeps the gradient finite for exact predictions
                epe = torch.sqrt((err**2).sum(-1) + 1e-12)[valid]
                total = total + epe.sum()
                n += int(valid.sum())
        return total / n

    return objective


@dataclass
class SweepResult:
    best_tau: float
    curve: list[tuple[float, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["tau", "objective"])
        for t, v in self.curve:
            wr.writerow([f"{t:.4f}", repr(v)])
        return buf.getvalue()


def sweep_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise InvalidSpec("sweep grid needs step > 0 and hi >= lo")
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


@torch.no_grad()
def calibrate_temperature_sweep(model: WinWinModel, objective: Callable, lo=1.0, hi=2.0, step=0.02) -> SweepResult:
    """Evaluate a uniform temperature multiplier over a grid; ties go to the smallest."""
    curve = []
    for t in sweep_grid(lo, hi, step):
        table = torch.full_like(model.tau, float(t))
        curve.append((float(t), float(objective(table))))
    vals = np.array([v for _, v in curve])
    return SweepResult(curve[int(np.argmin(vals))][0], curve)


def finetune_temperatures(
    model: WinWinModel,
    objective: Callable,
    steps: int,
    lr: float,
    init: torch.Tensor | None = None,
    min_tau: float = 1e-3,
    max_halvings: int = 8,
) -> tuple[torch.Tensor, list[float]]:
    """Gradient descent on the per-layer, per-head temperature table only.

    A step is accepted only if it does not increase the objective; otherwise
    the step size is halved and retried. Returns the table and the objective
    after each accepted step (first entry is the starting value).
    """
    tau = (model.tau if init is None else init).detach().clone()
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            current = float(objective(tau))
        history = [current]
        step_lr = lr
        for _ in range(steps):
            if not np.isfinite(current):
                raise TrainingDiverged("non-finite calibration objective")
            t = tau.clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(objective(t), t)
            for _ in range(max_halvings + 1):
                cand = (tau - step_lr * grad).clamp_min(min_tau)
                with torch.no_grad():
                    val = float(objective(cand))
                if val <= current:
                    break
                step_lr /= 2
            else:
                break
            tau, current = cand, val
            history.append(current)
    finally:
        for p, flag in zip(model.parameters(), frozen):
            p.requires_grad_(flag)
    return tau, history


# -- resolution robustness -----------------------------------------------------------


def random_crop_boxes(height, width, crop: tuple[int, int], n: int, seed=None, align: int = 1):
    """``n`` top-left corners of ``crop`` boxes uniformly placed on an ``align`` lattice."""
    ch, cw = crop
    if ch > height or cw > width:
        raise InvalidSpec(f"crop {crop} larger than image {height}x{width}")
    rng = as_rng(seed)
    ys = rng.integers(0, (height - ch) // align + 1, n) * align
    xs = rng.integers(0, (width - cw) // align + 1, n) * align
    return list(zip(ys.tolist(), xs.tolist()))


def robustness_sweep(model, data, resolutions, seed=0, tau=None, crops_per_image: int = 1):
    """Metric on random crops of each resolution; returns ``[(resolution, metric)]``.

    ``data`` is the stacked dataset tuple; every element is cropped identically.
    """
    h, w = data[0].shape[-2:]
    rng = as_rng(seed)
    p = model.cfg.patch_size
    rows = []
    for res in resolutions:
        res = tuple(res)
        if res[0] % p or res[1] % p:
            raise ShapeMismatch(f"resolution {res} not divisible by patch {p}")
        n_img = 1 if model.cfg.task == "segmentation" else 2
        crops = []
        for i in range(data[0].shape[0]):
            for y, x in random_crop_boxes(h, w, res, crops_per_image, rng):
                crops.append(tuple(
                    _crop(d[i : i + 1], y, x, res, j < n_img) for j, d in enumerate(data)
                ))
        stacked = tuple(torch.cat(parts) for parts in zip(*crops))
        rows.append((res, evaluate(model, stacked, tau)))
    return rows


def _crop(t, y, x, res, channels_first: bool):
    # images are (1, C, H, W); labels / flow / valid are (1, H, W[, 2])
    if channels_first:
        return t[..., y : y + res[0], x : x + res[1]]
    return t[:, y : y + res[0], x : x + res[1]]


def robustness_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["resolution", "metric"])
    for res, val in rows:
        wr.writerow([f"{res[0]}x{res[1]}", repr(float(val))])
    return buf.getvalue()
