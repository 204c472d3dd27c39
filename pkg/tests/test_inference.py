from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from winwin.errors import InvalidSpec
from winwin.inference import (
    TilingSpec,
    calibrate_temperature_sweep,
    evaluate,
    evaluate_seg,
    finetune_temperatures,
    full_res_objective,
    predict,
    predict_full,
    predict_resize,
    predict_tiled,
    random_crop_boxes,
    robustness_csv,
    robustness_sweep,
    sweep_grid,
    tile_boxes,
    tile_count_map,
)
from winwin.metrics import metric_miou
from winwin.model import ModelConfig, build_model
from winwin.synth import Layer, Motion, Shape, flow_tensors, flow_texture, render_flow_scene, seg_dataset, seg_tensors


def tiny_seg_model(seed=0, **kw):
    cfg = ModelConfig(task="segmentation", n_classes=4, patch_size=2, embed_dim=16, n_heads=2,
                      n_encoder_blocks=2, **kw)
    return build_model(cfg, seed).eval()


def tiny_flow_model(seed=0):
    cfg = ModelConfig(task="flow", patch_size=4, embed_dim=16, n_heads=2, n_encoder_blocks=1, n_decoder_blocks=1)
    return build_model(cfg, seed).eval()


class ShiftOracle(torch.nn.Module):
    """Stand-in flow model: exhaustive search of the global integer shift between frames."""

    def __init__(self, radius: int):
        super().__init__()
        self.cfg = SimpleNamespace(task="flow", patch_size=1)
        self.radius = radius

    def predict_dense(self, f1, f2, tau=None):
        b, _, h, w = f1.shape
        r = self.radius
        best, arg = None, None
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                a = f1[..., max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
                c = f2[..., max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)]
                err = float((a - c).abs().mean())
                if best is None or err < best:
                    best, arg = err, (dx, dy)
        out = torch.zeros(b, 3, h, w)
        out[:, 0], out[:, 1] = arg
        return out


def brute_counts(h, w, crop, boxes):
    count = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            count[y, x] = sum(by <= y < by + crop[0] and bx <= x < bx + crop[1] for by, bx in boxes)
    return count


# -- direct / resize ---------------------------------------------------------------


def test_full_equals_single_zero_overlap_tile():
    model = tiny_seg_model()
    x = torch.rand(2, 3, 24, 32)
    full = predict_full(model, x)
    tiled, count = predict_tiled(model, x, TilingSpec((24, 32), 0.0))
    assert torch.equal(full, tiled) and torch.all(count == 1)


def test_resize_at_train_res_is_direct():
    model = tiny_seg_model()
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(predict_resize(model, x, (16, 16)), predict_full(model, x))


def test_resize_scales_flow_per_axis():
    from winwin.inference import _resize_flow

    small = torch.zeros(1, 3, 8, 12)
    small[:, 0], small[:, 1], small[:, 2] = 1.5, -2.0, 0.7
    big = _resize_flow(small, (16, 36))
    assert torch.allclose(big[:, 0], torch.full((1, 16, 36), 4.5))
    assert torch.allclose(big[:, 1], torch.full((1, 16, 36), -4.0))
    assert torch.allclose(big[:, 2], torch.full((1, 16, 36), 0.7))


def test_resize_recovers_constant_flow():
    rng = np.random.default_rng(4)
    dx, dy = 6.0, -4.0
    layer = Layer(Shape("full", (32, 32)), flow_texture(rng), Motion.translation(dx, dy))
    sample = render_flow_scene(64, 64, [layer])
    f1, f2, gt, valid = flow_tensors([sample])
    pred = predict_resize(ShiftOracle(radius=4), f1, (32, 32), f2)
    assert torch.allclose(pred[:, 0], torch.full_like(pred[:, 0], dx), atol=0.1)
    assert torch.allclose(pred[:, 1], torch.full_like(pred[:, 1], dy), atol=0.1)


# -- tiling -------------------------------------------------------------------------


def test_hd_tiling_counts():
    tiling = TilingSpec((512, 512), 0.5)
    count = tile_count_map(720, 1280, tiling)
    assert count.min() >= 1 and count.max() <= 6
    # oracle on a subsampled pixel lattice (full scan is slow in pure Python)
    boxes = tile_boxes(720, 1280, tiling)
    ys, xs = np.arange(0, 720, 7), np.arange(0, 1280, 7)
    for y in ys:
        for x in xs:
            want = sum(by <= y < by + 512 and bx <= x < bx + 512 for by, bx in boxes)
            assert count[y, x] == want


@pytest.mark.parametrize("h,w,crop,overlap", [(20, 30, (8, 12), 0.5), (17, 23, (5, 7), 0.3),
                                              (16, 16, (16, 16), 0.5), (12, 40, (12, 9), 0.75)])
def test_tile_count_vs_brute_force(h, w, crop, overlap):
    tiling = TilingSpec(crop, overlap)
    boxes = tile_boxes(h, w, tiling)
    assert np.array_equal(tile_count_map(h, w, tiling), brute_counts(h, w, crop, boxes))
    assert all(0 <= y <= h - crop[0] and 0 <= x <= w - crop[1] for y, x in boxes)


def test_zero_overlap_is_concatenation():
    model = tiny_seg_model()
    x = torch.rand(1, 3, 16, 24)
    pred, count = predict_tiled(model, x, TilingSpec((8, 12), 0.0))
    assert torch.all(count == 1)
    for y in (0, 8):
        for xx in (0, 12):
            part = predict_full(model, x[..., y : y + 8, xx : xx + 12])
            assert torch.equal(pred[..., y : y + 8, xx : xx + 12], part)


def test_tiled_average_and_count():
    model = tiny_seg_model()
    x = torch.rand(1, 3, 16, 24)
    tiling = TilingSpec((8, 8), 0.5)
    pred, count = predict_tiled(model, x, tiling)
    assert np.array_equal(count.numpy().astype(np.int64), tile_count_map(16, 24, tiling))
    total = torch.zeros_like(pred)
    for y, xx in tile_boxes(16, 24, tiling):
        total[..., y : y + 8, xx : xx + 8] += predict_full(model, x[..., y : y + 8, xx : xx + 8])
    assert torch.allclose(pred, total / count, atol=1e-6)


def test_tiling_validation():
    with pytest.raises(InvalidSpec):
        TilingSpec((8, 8), 1.0).validate(16, 16)
    with pytest.raises(InvalidSpec):
        TilingSpec((32, 8), 0.5).validate(16, 16)
    with pytest.raises(InvalidSpec):
        predict(tiny_seg_model(), torch.rand(1, 3, 8, 8), strategy="nearest")


# -- evaluation ------------------------------------------------------------------------


def test_evaluate_seg_dataset_level():
    model = tiny_seg_model()
    images, labels = seg_tensors(seg_dataset(3, (16, 16), 4, seed=0))
    pred = predict_full(model, images).argmax(1)
    assert evaluate_seg(model, images, labels, 4) == pytest.approx(
        metric_miou(pred.numpy(), labels.numpy(), 4), abs=1e-12)


# -- temperature calibration ------------------------------------------------------------


def test_sweep_grid_51_candidates():
    grid = sweep_grid(1.0, 2.0, 0.02)
    assert grid.size == 51 and grid[0] == 1.0 and grid[-1] == 2.0
    model = tiny_seg_model()
    seen = []
    res = calibrate_temperature_sweep(model, lambda t: seen.append(float(t[0, 0])) or 0.0, 1.0, 2.0, 0.02)
    assert len(seen) == 51 and len(res.curve) == 51
    assert res.best_tau == 1.0  # constant objective: ties go to lo


def test_sweep_picks_minimum():
    model = tiny_seg_model()
    res = calibrate_temperature_sweep(model, lambda t: (float(t[0, 0]) - 1.3) ** 2, 0.8, 2.0, 0.02)
    assert res.best_tau == pytest.approx(1.3)
    assert res.to_csv().splitlines()[0] == "tau,objective"
    with pytest.raises(InvalidSpec):
        sweep_grid(2.0, 1.0, 0.1)


def test_finetune_zero_steps_and_frozen_weights():
    model = tiny_seg_model()
    data = seg_tensors(seg_dataset(2, (16, 16), 4, seed=1))
    obj = full_res_objective(model, data)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    tau, hist = finetune_temperatures(model, obj, 0, 0.1)
    assert torch.equal(tau, model.tau) and len(hist) == 1
    tau, hist = finetune_temperatures(model, obj, 5, 0.5)
    after = model.state_dict()
    assert max(float((before[k] - after[k]).abs().max()) for k in before) == 0.0
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert not model.tau.requires_grad


def test_finetune_not_worse_than_sweep():
    model = tiny_seg_model(seed=3)
    data = seg_tensors(seg_dataset(2, (16, 16), 4, seed=2))
    obj = full_res_objective(model, data)
    sweep = calibrate_temperature_sweep(model, obj, 0.8, 2.0, 0.1)
    best = dict(sweep.curve)[sweep.best_tau]
    tau, hist = finetune_temperatures(model, obj, 4, 0.2, init=torch.full_like(model.tau, sweep.best_tau))
    with torch.no_grad():
        assert float(obj(tau)) <= best + 1e-6
    assert hist[0] == pytest.approx(best, rel=1e-6)


def test_flow_objective_is_differentiable():
    model = tiny_flow_model()
    from winwin.synth import flow_dataset

    data = flow_tensors(flow_dataset(1, (16, 16), 3, seed=0))
    obj = full_res_objective(model, data)
    t = model.tau.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(obj(t), t)
    assert torch.isfinite(g).all() and g.abs().sum() > 0


# -- robustness ----------------------------------------------------------------------


def test_crop_boxes_count_and_coverage():
    boxes = random_crop_boxes(30, 40, (8, 12), 25, seed=0, align=4)
    assert len(boxes) == 25
    assert all(y % 4 == 0 and x % 4 == 0 and y + 8 <= 30 and x + 12 <= 40 for y, x in boxes)
    cover = np.zeros((30, 40), dtype=np.int64)
    for y, x in boxes:
        cover[y : y + 8, x : x + 12] += 1
    assert np.array_equal(cover, brute_counts(30, 40, (8, 12), boxes))
    assert cover.sum() == 25 * 8 * 12


def test_robustness_full_resolution_matches_evaluate():
    model = tiny_seg_model()
    data = seg_tensors(seg_dataset(3, (16, 16), 4, seed=5))
    rows = robustness_sweep(model, data, [(16, 16), (8, 8)], seed=0)
    assert rows[0] == ((16, 16), evaluate(model, data))
    assert robustness_csv(rows).splitlines()[:2] == ["resolution,metric", f"16x16,{rows[0][1]!r}"]
