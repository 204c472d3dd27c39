from __future__ import annotations

import pytest

# small enough that a full train + eval takes about a second
TINY_SEG = """\
run.task = segmentation
run.name = tiny
model.n_classes = 4
model.patch_size = 4
model.embed_dim = 16
model.n_heads = 2
model.n_encoder_blocks = 1
sampler.n_windows = 2
sampler.window_shape = 3,3
train.crop_shape = 4,4
train.epochs = 2
train.batch_size = 4
train.warmup_epochs = 0.5
data.n_train = 8
data.n_val = 4
data.resolution = 32,32
data.k_classes = 4
"""

TINY_FLOW = """\
run.task = flow
run.name = tinyflow
model.patch_size = 4
model.embed_dim = 16
model.n_heads = 2
model.n_encoder_blocks = 1
model.n_decoder_blocks = 1
binocular.n_first = 2
binocular.shape_first = 3,3
binocular.m_second = 2
binocular.shape_second = 3,3
train.epochs = 1
train.batch_size = 4
train.warmup_epochs = 0
data.n_train = 4
data.n_val = 2
data.resolution = 32,32
data.max_disp = 4
"""


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("WINWIN_RUN_ROOT", str(root))
    return root


@pytest.fixture
def tiny_seg_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_SEG)
    return path


@pytest.fixture
def tiny_flow_cfg(tmp_path):
    path = tmp_path / "tinyflow.cfg"
    path.write_text(TINY_FLOW)
    return path
