"""Segmentation mIoU and optical-flow endpoint-error reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, ShapeMismatch

EPE_BUCKETS = (("s0-10", 0.0, 10.0), ("s10-40", 10.0, 40.0), ("s40+", 40.0, np.inf))


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k in sorted(self.values):
            wr.writerow([k, repr(float(self.values[k]))])
        return buf.getvalue()


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """(k, k) counts indexed [gt, pred]."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def metric_miou(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Mean IoU over classes present in ``gt`` or ``pred``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    cm = confusion_matrix(pred, gt, k)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    if not present.any():
        raise EmptyMask("no pixel to score")
    return float(np.mean(tp[present] / union[present]))


def metric_epe(pred_uv: np.ndarray, gt_uv: np.ndarray, valid: np.ndarray) -> MetricReport:
    """EPE, 1px outlier rate and EPE bucketed by ground-truth flow norm.

    ``pred_uv`` and ``gt_uv`` are ``(..., 2)``; ``valid`` is ``(...)``. Empty
    buckets report NaN.
    """
    pred_uv, gt_uv = np.asarray(pred_uv, dtype=np.float64), np.asarray(gt_uv, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred_uv.shape != gt_uv.shape or pred_uv.shape[:-1] != valid.shape:
        raise ShapeMismatch(f"pred {pred_uv.shape}, gt {gt_uv.shape}, valid {valid.shape}")
    if not valid.any():
        raise EmptyMask("no valid pixel")
    err = np.sqrt(((pred_uv - gt_uv) ** 2).sum(-1))[valid]
    norm = np.sqrt((gt_uv**2).sum(-1))[valid]
    out = {"epe": float(err.mean()), "outlier_1px": float((err > 1.0).mean())}
    for name, lo, hi in EPE_BUCKETS:
        sel = (norm <= hi) & ((norm > lo) if lo > 0 else (norm >= lo))
        out[name] = float(err[sel].mean()) if sel.any() else float("nan")
    return MetricReport(out)
