"""Binary checkpoint: magic, version, a JSON config block, then named float32 tensors.

Layout (all integers little-endian uint32)::

    b"WINWINCK" | version | len(config) | config utf-8 | n_tensors
    per tensor: len(name) | name | ndim | dims... | float32 LE data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidSpec
from .model import ModelConfig, WinWinModel

MAGIC = b"WINWINCK"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, _u32(VERSION), _u32(len(cfg)), cfg, _u32(len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        key = name.encode()
        parts += [_u32(len(key)), key, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[: len(MAGIC)] != MAGIC:
        raise InvalidSpec("not a checkpoint file")
    pos = len(MAGIC)

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise InvalidSpec(f"unsupported checkpoint version {version}")
    n = u32()
    config = json.loads(data[pos : pos + n])
    pos += n
    tensors = {}
    for _ in range(u32()):
        k = u32()
        name = data[pos : pos + k].decode()
        pos += k
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return config, tensors


def model_tensors(model: WinWinModel) -> dict[str, np.ndarray]:
    # state_dict includes tau (a parameter) but not the non-persistent position table
    return {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(path, model: WinWinModel, extra: dict | None = None) -> Path:
    path = Path(path)
    config = {"model": model.cfg.to_dict(), **(extra or {})}
    path.write_bytes(encode(config, model_tensors(model)))
    return path


def load_checkpoint(path, dtype=torch.float32) -> tuple[WinWinModel, dict]:
    config, tensors = decode(Path(path).read_bytes())
    model = WinWinModel(ModelConfig.from_dict(config["model"])).to(dtype)
    state = {k: torch.from_numpy(v).to(dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, config
