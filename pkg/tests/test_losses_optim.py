from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from winwin.errors import EmptyMask, ShapeMismatch
from winwin.losses import cross_entropy_loss, laplacian_flow_loss
from winwin.optim import AdamWConfig, OptimizerState, adamw_step, layer_decay_scales, lr_at

D = torch.float64


# -- cross-entropy -------------------------------------------------------------


def test_ce_confident_logits():
    labels = torch.tensor([0, 2, 1, 2])
    logits = torch.nn.functional.one_hot(labels, 3).double() * 50
    assert cross_entropy_loss(logits, labels) < 1e-3


def test_ce_uniform_19_classes():
    loss = cross_entropy_loss(torch.zeros(7, 5, 19, dtype=D), torch.zeros(7, 5, dtype=torch.long))
    assert float(loss) == pytest.approx(math.log(19), abs=1e-12)


def test_ce_vs_per_pixel_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 4, 5, 6, generator=g, dtype=D)
    labels = torch.randint(0, 6, (3, 4, 5), generator=g)
    mask = torch.rand(3, 4, 5, generator=g) > 0.3
    total, n = 0.0, 0
    for idx in np.ndindex(3, 4, 5):
        if not mask[idx]:
            continue
        row = [float(x) for x in logits[idx]]
        lse = math.log(sum(math.exp(x) for x in row))
        total += lse - row[int(labels[idx])]
        n += 1
    assert abs(float(cross_entropy_loss(logits, labels, mask)) - total / n) < 1e-10


def test_ce_mask_blocks_gradient():
    logits = torch.randn(10, 4, dtype=D, requires_grad=True)
    labels = torch.randint(0, 4, (10,))
    mask = torch.arange(10) < 6
    cross_entropy_loss(logits, labels, mask).backward()
    assert torch.all(logits.grad[~mask] == 0) and logits.grad[mask].abs().sum() > 0


def test_ce_errors():
    with pytest.raises(EmptyMask):
        cross_entropy_loss(torch.zeros(3, 2), torch.zeros(3, dtype=torch.long), torch.zeros(3, dtype=torch.bool))
    with pytest.raises(ShapeMismatch):
        cross_entropy_loss(torch.zeros(3, 2), torch.zeros(4, dtype=torch.long))


# -- Laplacian flow loss ---------------------------------------------------------


def test_laplace_perfect_prediction():
    gt = torch.randn(4, 5, 2, dtype=D)
    loss = laplacian_flow_loss(gt.clone(), torch.zeros(4, 5, dtype=D), gt, torch.ones(4, 5, dtype=torch.bool))
    assert float(loss) == 0.0


def test_laplace_unit_error():
    gt = torch.zeros(3, 2, dtype=D)
    loss = laplacian_flow_loss(gt + 1, torch.zeros(3, dtype=D), gt, torch.ones(3, dtype=torch.bool))
    assert float(loss) == 2.0


def test_laplace_vs_per_pixel_oracle():
    g = torch.Generator().manual_seed(1)
    pred, gt = torch.randn(6, 7, 2, generator=g, dtype=D), torch.randn(6, 7, 2, generator=g, dtype=D)
    s = torch.randn(6, 7, generator=g, dtype=D)
    valid = torch.rand(6, 7, generator=g) > 0.2
    mask = torch.rand(6, 7, generator=g) > 0.2
    vals = [
        (abs(float(pred[i, j, 0] - gt[i, j, 0])) + abs(float(pred[i, j, 1] - gt[i, j, 1])))
        * math.exp(-float(s[i, j])) + 2 * float(s[i, j])
        for i in range(6) for j in range(7) if valid[i, j] and mask[i, j]
    ]
    got = float(laplacian_flow_loss(pred, s, gt, valid, mask))
    assert abs(got - sum(vals) / len(vals)) < 1e-12


@pytest.mark.parametrize("du,dv", [(1.0, 1.0), (0.3, 2.5), (4.0, 0.0)])
def test_laplace_optimal_scale(du, dv):
    # 1D scan of the per-pixel loss over s
    grid = np.arange(-4, 4, 1e-4)
    e = abs(du) + abs(dv)
    best = grid[np.argmin(e * np.exp(-grid) + 2 * grid)]
    assert best == pytest.approx(math.log(e / 2), abs=1e-3)
    # the implementation agrees with the scan at the optimum and nearby
    for s in (best - 0.5, best, best + 0.5):
        one = laplacian_flow_loss(torch.tensor([[du, dv]], dtype=D), torch.tensor([s], dtype=D),
                                  torch.zeros(1, 2, dtype=D), torch.ones(1, dtype=torch.bool))
        assert float(one) == pytest.approx(e * math.exp(-s) + 2 * s, abs=1e-12)


def test_laplace_invalid_pixels_have_no_gradient():
    pred = torch.randn(8, 2, dtype=D, requires_grad=True)
    s = torch.zeros(8, dtype=D, requires_grad=True)
    valid = torch.tensor([1, 1, 0, 1, 0, 1, 1, 1], dtype=torch.bool)
    laplacian_flow_loss(pred, s, torch.zeros(8, 2, dtype=D), valid).backward()
    assert torch.all(pred.grad[~valid] == 0) and torch.all(s.grad[~valid] == 0)


def test_laplace_errors():
    with pytest.raises(EmptyMask):
        laplacian_flow_loss(torch.zeros(2, 2), torch.zeros(2), torch.zeros(2, 2), torch.zeros(2, dtype=torch.bool))
    with pytest.raises(ShapeMismatch):
        laplacian_flow_loss(torch.zeros(2, 2), torch.zeros(3), torch.zeros(2, 2), torch.ones(2, dtype=torch.bool))


# -- AdamW -----------------------------------------------------------------------------


def reference_adamw(x0, grad_fn, lrs, b1, b2, eps, wd):
    # plain-float per-coordinate transcription of the AdamW recurrences
    x = list(x0)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    out = []
    for t, lr in enumerate(lrs, 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            x[i] = x[i] * (1 - lr * wd)
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            x[i] = x[i] - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(list(x))
    return out


def test_zero_grad_no_decay_is_noop():
    p = {"w": torch.randn(3, 4, dtype=D)}
    before = p["w"].clone()
    state = OptimizerState()
    for _ in range(3):
        adamw_step(p, {"w": torch.zeros(3, 4, dtype=D)}, state, 0.1, AdamWConfig(weight_decay=0.0))
    assert torch.equal(p["w"], before)


def test_first_step_moves_by_lr():
    p = {"w": torch.zeros(5, dtype=D)}
    g = torch.tensor([3.0, -2.0, 0.5, -7.0, 1e-2], dtype=D)
    adamw_step(p, {"w": g}, OptimizerState(), 1e-3, AdamWConfig(weight_decay=0.0))
    assert torch.allclose(p["w"], -1e-3 * torch.sign(g), rtol=1e-5)


def test_quadratic_trajectory_vs_reference():
    a = np.array([[3.0, 0.5], [0.5, 1.0]])
    bvec = np.array([1.0, -2.0])

    def grad(x):
        return list(a @ np.asarray(x) - bvec)

    lrs = [lr_at(t, 100, 10, 0.05, 1e-4) for t in range(1, 101)]
    cfg = AdamWConfig(betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    ref = reference_adamw([2.0, -1.0], grad, lrs, 0.9, 0.95, 1e-8, 0.1)
    x = torch.tensor([2.0, -1.0], dtype=D)
    state = OptimizerState()
    # library optimizer as a second, independent reference
    y = torch.tensor([2.0, -1.0], dtype=D, requires_grad=True)
    opt = torch.optim.AdamW([y], lr=lrs[0], betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    for t, lr in enumerate(lrs):
        g = torch.tensor(grad(x.tolist()), dtype=D)
        adamw_step({"x": x}, {"x": g}, state, lr, cfg)
        assert np.max(np.abs(x.numpy() - ref[t])) < 1e-8
        for group in opt.param_groups:
            group["lr"] = lr
        y.grad = torch.tensor(grad(y.detach().tolist()), dtype=D)
        opt.step()
        assert torch.max((x - y.detach()).abs()) < 1e-8


def test_decay_mask_and_lr_scale():
    p = {"w": torch.ones(2, dtype=D), "b": torch.ones(2, dtype=D)}
    g = {"w": torch.zeros(2, dtype=D), "b": torch.zeros(2, dtype=D)}
    adamw_step(p, g, OptimizerState(), 0.1, AdamWConfig(weight_decay=0.5),
               lr_scale={"w": 0.5, "b": 1.0}, decay={"w": True, "b": False})
    assert torch.allclose(p["w"], torch.full((2,), 1 - 0.05 * 0.5, dtype=D))
    assert torch.equal(p["b"], torch.ones(2, dtype=D))


# -- schedule -------------------------------------------------------------------


def test_lr_schedule_landmarks():
    assert lr_at(0, 100, 10, 1e-3, 1e-6) == 0.0
    assert lr_at(5, 100, 10, 1e-3, 1e-6) == pytest.approx(5e-4)
    assert lr_at(10, 100, 10, 1e-3, 1e-6) == 1e-3
    assert lr_at(100, 100, 10, 1e-3, 1e-6) == 1e-6
    assert abs(lr_at(55, 100, 10, 1e-3, 1e-6) - (1e-3 + 1e-6) / 2) < 1e-12
    assert lr_at(250, 100, 10, 1e-3, 1e-6) == 1e-6
    lrs = [lr_at(t, 100, 10, 1e-3, 1e-6) for t in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_no_warmup():
    assert lr_at(0, 50, 0, 2e-3, 0.0) == 2e-3


def test_layer_decay_scales():
    names = ["patch_embed.weight", "encoder.0.attn.q.weight", "encoder.1.mlp.fc1.bias", "head.fc.weight"]
    s = layer_decay_scales(names, 2, 0.5)
    assert s == {"patch_embed.weight": 0.125, "encoder.0.attn.q.weight": 0.25,
                 "encoder.1.mlp.fc1.bias": 0.5, "head.fc.weight": 1.0}
