"""Masked training objectives. Pixel-dimension arrays may have any leading shape."""

from __future__ import annotations

import torch

from .errors import EmptyMask, ShapeMismatch


def _select(mask, *arrays):
    if mask is None:
        return arrays
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise EmptyMask("no supervised pixel")
    return tuple(a[mask] for a in arrays)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean negative log-softmax of the true class over masked pixels.

    Args:
        logits: ``(..., K)`` class scores.
        labels: ``(...)`` integer class ids.
        mask: optional ``(...)`` boolean; unmasked pixels get no loss and no gradient.
    """
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    logits, labels = _select(mask, logits, labels)
    if logits.numel() == 0:
        raise EmptyMask("no supervised pixel")
    logp = torch.log_softmax(logits.reshape(-1, logits.shape[-1]), dim=-1)
    return -logp.gather(1, labels.reshape(-1, 1).long()).mean()


def laplacian_flow_loss(
    pred_uv: torch.Tensor, logscale: torch.Tensor, gt_uv: torch.Tensor, valid, mask=None
) -> torch.Tensor:
    """L1 flow error weighted by a predicted scale: ``(|du| + |dv|) * exp(-s) + 2 s``.

    One scale covers both components, hence the factor 2 on ``s``. Averaged over
    pixels that are valid and inside ``mask``.
    """
    if pred_uv.shape != gt_uv.shape or pred_uv.shape[:-1] != logscale.shape:
        raise ShapeMismatch(
            f"pred {tuple(pred_uv.shape)}, scale {tuple(logscale.shape)}, gt {tuple(gt_uv.shape)}"
        )
    keep = torch.as_tensor(valid, dtype=torch.bool)
    if mask is not None:
        keep = keep & torch.as_tensor(mask, dtype=torch.bool)
    pred_uv, logscale, gt_uv = _select(keep, pred_uv, logscale, gt_uv)
    err = (pred_uv - gt_uv).abs().sum(-1)
    return (err * torch.exp(-logscale) + 2 * logscale).mean()
