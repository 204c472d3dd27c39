"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass
class AdamWConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: OptimizerState,
    lr: float,
    cfg: AdamWConfig,
    lr_scale: dict[str, float] | None = None,
    decay: dict[str, bool] | None = None,
) -> OptimizerState:
    """One in-place AdamW update of every parameter that has a gradient.

    ``lr_scale`` multiplies the learning rate per tensor (layer decay);
    ``decay`` selects which tensors get weight decay (all by default).
    """
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        step_lr = lr * (lr_scale[name] if lr_scale else 1.0)
        if cfg.weight_decay and (decay is None or decay.get(name, True)):
            p.mul_(1 - step_lr * cfg.weight_decay)
        denom = (v / c2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-step_lr / c1)
    return state


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``base_lr`` then cosine decay reaching ``min_lr`` at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    t = min(step, total_steps) - warmup_steps
    frac = t / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * frac))


def layer_decay_scales(names, n_blocks: int, decay: float) -> dict[str, float]:
    """Per-tensor lr multipliers ``decay ** (depth_max - depth)``.

    Embedding is depth 0, encoder block i is depth i + 1, everything after the
    encoder sits at the top and keeps the full rate.
    """
    top = n_blocks + 1
    out = {}
    for name in names:
        if name.startswith("patch_embed"):
            depth = 0
        elif name.startswith("encoder."):
            depth = int(name.split(".")[1]) + 1
        else:
            depth = top
        out[name] = decay ** (top - depth)
    return out
