"""Toy dense-prediction ViT: patch embedding, RoPE attention with per-head
temperatures, a cross-attention decoder for image pairs, and window-local
convolutional or per-token linear heads.

Images are ``(B, C, H, W)`` tensors. Tokens are ``(B, N, D)`` in row-major
grid order; positions are ``(B, N, 2)`` float (x, y) token coordinates.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidSpec, ShapeMismatch, WindowTooSmall
from .geometry import TokenGrid, Window, WindowSet, token_indices


@dataclass
class ModelConfig:
    task: str = "segmentation"  # segmentation | flow
    n_classes: int = 19
    patch_size: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 2
    mlp_ratio: float = 4.0
    rope_base: float = 100.0
    pos_embedding: str = "rope"  # rope | cosine_absolute
    head: str = "conv"  # conv | linear
    head_channels: int = 0  # 0 -> embed_dim
    ref_grid: tuple[int, int] = (16, 16)  # (w, h) the cosine table is defined on
    in_channels: int = 3
    input_mean: float = 0.5
    input_std: float = 0.25
    match_init_gain: float = 2.0  # cross-attention query/key init scale (flow)

    def __post_init__(self):
        self.ref_grid = tuple(self.ref_grid)
        if self.task not in ("segmentation", "flow"):
            raise InvalidSpec(f"unknown task {self.task!r}")
        if self.pos_embedding not in ("rope", "cosine_absolute"):
            raise InvalidSpec(f"unknown pos_embedding {self.pos_embedding!r}")
        if self.head not in ("conv", "linear"):
            raise InvalidSpec(f"unknown head {self.head!r}")
        if self.embed_dim % self.n_heads:
            raise InvalidSpec("embed_dim must be divisible by n_heads")
        if self.pos_embedding == "rope" and self.head_dim % 4:
            # x and y halves are each rotated in consecutive pairs
            raise InvalidSpec("head_dim must be divisible by 4 for 2D rotary embeddings")
        if self.task == "segmentation" and self.n_classes < 2:
            raise InvalidSpec("n_classes must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def out_channels(self) -> int:
        # flow: (u, v, log-scale)
        return self.n_classes if self.task == "segmentation" else 3

    @property
    def n_attention_layers(self) -> int:
        dec = 2 * self.n_decoder_blocks if self.task == "flow" else 0
        return self.n_encoder_blocks + dec

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- attention cost accounting -------------------------------------------------


class MacCounter:
    """Multiply-accumulates spent in the attention matrix products (QK^T and AV)."""

    def __init__(self):
        self.macs = 0
        self.calls = 0


_active_counters: list[MacCounter] = []


@contextmanager
def count_attention_macs():
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


# -- functional pieces -----------------------------------------------------------


def patchify(images: torch.Tensor, patch_size: int) -> tuple[torch.Tensor, TokenGrid]:
    """Split ``(B, C, H, W)`` images into ``(B, N, p*p*C)`` row-major patch vectors."""
    b, c, h, w = images.shape
    grid = TokenGrid.from_pixels(h, w, patch_size)
    p = patch_size
    x = images.reshape(b, c, grid.height, p, grid.width, p)
    x = x.permute(0, 2, 4, 3, 5, 1).reshape(b, grid.n_tokens, p * p * c)
    return x, grid


def unpatchify(patches: torch.Tensor, grid: TokenGrid, channels: int) -> torch.Tensor:
    b = patches.shape[0]
    p = grid.patch_size
    x = patches.reshape(b, grid.height, grid.width, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, grid.pixel_height, grid.pixel_width)


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles), torch.sin(angles)
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = 100.0) -> torch.Tensor:
    """2D rotary embedding.

    The first half of the last dimension is rotated by the x coordinate, the
    second half by y; within a half, consecutive pairs (2j, 2j+1) turn by
    ``pos * base ** (-4j / d)``.

    Args:
        x: ``(..., N, d)`` features, ``d`` divisible by 4.
        positions: ``(..., N, 2)`` (x, y) token coordinates, broadcastable to ``x``.
        base: frequency base.
    """
    d = x.shape[-1]
    if d % 4:
        raise InvalidSpec(f"rope needs a feature size divisible by 4, got {d}")
    j = torch.arange(d // 4, dtype=x.dtype, device=x.device)
    freq = base ** (-4.0 * j / d)
    pos = positions.to(x.dtype)
    ax = pos[..., 0:1] * freq
    ay = pos[..., 1:2] * freq
    half = d // 2
    return torch.cat([_rotate_pairs(x[..., :half], ax), _rotate_pairs(x[..., half:], ay)], dim=-1)


def attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, tau: torch.Tensor | float | None = None
) -> torch.Tensor:
    """softmax(tau * Q K^T / sqrt(d)) V over ``(B, H, N, d)`` tensors.

    ``tau`` is a scalar or a per-head ``(H,)`` multiplier; ``None`` means 1.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    if tau is not None:
        if isinstance(tau, torch.Tensor) and tau.ndim == 1:
            tau = tau.view(1, -1, 1, 1)
        scale = tau * scale
    # scaling the queries keeps the (N, N) logits to a single allocation
    weights = torch.softmax((q * scale) @ k.transpose(-2, -1), dim=-1)
    if _active_counters:
        b, h, nq, _ = q.shape
        macs = 2 * b * h * nq * k.shape[-2] * d
        for c in _active_counters:
            c.macs += macs
            c.calls += 1
    return weights @ v


def cosine_position_table(dim: int, width: int, height: int) -> torch.Tensor:
    """Fixed 2D sin/cos embedding, ``(dim, height, width)``: x in the first half, y in the second."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))

    def enc(n):
        a = torch.arange(n, dtype=torch.float64)[:, None] * omega[None, :]
        return torch.cat([torch.sin(a), torch.cos(a)], dim=1)  # (n, dim/2)

    ex = enc(width).T[:, None, :].expand(2 * quarter, height, width)
    ey = enc(height).T[:, :, None].expand(2 * quarter, height, width)
    table = torch.cat([ex, ey], dim=0)
    if table.shape[0] < dim:
        table = F.pad(table, (0, 0, 0, 0, 0, dim - table.shape[0]))
    return table.float()


def scatter_to_feature_maps(
    features: torch.Tensor, ws: WindowSet, grid: TokenGrid
) -> list[torch.Tensor]:
    """Reshape one sample's visible-token features into per-window ``(C, h, w)`` maps.

    ``features`` is ``(n, C)`` ordered like ``token_indices(ws, grid)``; extra
    tokens are dropped.
    """
    idx = token_indices(ws, grid)
    if features.shape[0] != idx.size:
        raise ShapeMismatch(f"{features.shape[0]} features for {idx.size} visible tokens")
    maps = []
    for win in ws.windows:
        rows = torch.as_tensor(np.searchsorted(idx, win.indices(grid)), device=features.device)
        maps.append(features[rows].T.reshape(features.shape[1], win.h, win.w))
    return maps


def gather_from_feature_maps(maps: Sequence[torch.Tensor], ws: WindowSet, grid: TokenGrid) -> torch.Tensor:
    """Inverse of :func:`scatter_to_feature_maps` on the window tokens."""
    idx = np.concatenate([w.indices(grid) for w in ws.windows])
    flat = torch.cat([m.reshape(m.shape[0], -1).T for m in maps], dim=0)
    order = torch.as_tensor(np.argsort(idx, kind="stable"), device=flat.device)
    return flat[order]


def window_pixel_indices(win: Window, grid: TokenGrid) -> np.ndarray:
    """Flat pixel indices (row-major over the full image) covered by a window."""
    p = grid.patch_size
    ys = np.arange(win.y0 * p, win.y1 * p)[:, None]
    xs = np.arange(win.x0 * p, win.x1 * p)[None, :]
    return (ys * grid.pixel_width + xs).ravel()


def token_pixel_indices(tokens: np.ndarray, grid: TokenGrid) -> np.ndarray:
    """(n, p*p) flat pixel indices of each token's patch."""
    p = grid.patch_size
    ty, tx = np.divmod(np.asarray(tokens), grid.width)
    oy, ox = np.divmod(np.arange(p * p), p)
    ys = ty[:, None] * p + oy[None, :]
    xs = tx[:, None] * p + ox[None, :]
    return ys * grid.pixel_width + xs


# -- modules -----------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    """Multi-head attention with optional RoPE.

    With ``offset_readout`` every head also reports the attention-weighted
    mean offset ``sum_j a_ij (pos_j - pos_i)`` of the keys it attends to,
    projected back to ``dim``. Rotary embeddings only reach the logits, so
    this is the decoder's path for expressing where a match lies.
    """

    def __init__(self, dim: int, n_heads: int, rope_base: float | None, offset_readout: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.offset_proj = nn.Linear(2 * n_heads, dim) if offset_readout else None

    def forward(self, x, pos, tau=None, context=None, context_pos=None):
        if context is None:
            context, context_pos = x, pos
        b, n, dim = x.shape
        m = context.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, n, h, dim // h).transpose(1, 2)
        k, v = self.kv(context).view(b, m, 2, h, dim // h).permute(2, 0, 3, 1, 4)
        if self.rope_base is not None:
            q = rope_rotate(q, pos[:, None], self.rope_base)
            k = rope_rotate(k, context_pos[:, None], self.rope_base)
        if self.offset_proj is None:
            out = attention(q, k, v, tau)
            return self.proj(out.transpose(1, 2).reshape(b, n, dim))
        # carry key coordinates through the value product
        cp = context_pos.to(v.dtype)[:, None].expand(b, h, m, 2)
        out = attention(q, k, torch.cat([v, cp], dim=-1), tau)
        out, where = out[..., :-2], out[..., -2:]
        offset = (where - pos.to(v.dtype)[:, None]).transpose(1, 2).reshape(b, n, 2 * h)
        return self.proj(out.transpose(1, 2).reshape(b, n, dim)) + self.offset_proj(offset)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim, n_heads, mlp_ratio, rope_base):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rope_base)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, pos, tau=None):
        x = x + self.attn(self.norm1(x), pos, tau)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Self-attention on frame-1 tokens, cross-attention into frame 2, MLP."""

    def __init__(self, dim, n_heads, mlp_ratio, rope_base):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rope_base)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rope_base, offset_readout=True)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, pos, ctx, ctx_pos, tau_self=None, tau_cross=None):
        x = x + self.self_attn(self.norm1(x), pos, tau_self)
        x = x + self.cross_attn(self.norm2(x), pos, tau_cross, self.norm_ctx(ctx), ctx_pos)
        return x + self.mlp(self.norm3(x))


class ConvHead(nn.Module):
    """Two same-padded 3x3 convs then a learned ``patch_size``x pixel-shuffle upsampling."""

    def __init__(self, dim: int, hidden: int, out_channels: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(dim, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.up = nn.Conv2d(hidden, out_channels * patch_size**2, 1)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """``(k, C, h, w)`` token maps -> ``(k, out, h*p, w*p)`` pixel predictions."""
        if min(maps.shape[-2:]) < 3:
            raise WindowTooSmall(f"conv head needs windows of at least 3x3 tokens, got {tuple(maps.shape[-2:])}")
        x = F.gelu(self.conv1(maps))
        x = F.gelu(self.conv2(x))
        return F.pixel_shuffle(self.up(x), self.patch_size)


class LinearHead(nn.Module):
    """Per-token affine map to a ``p x p`` patch of predictions; no spatial mixing."""

    def __init__(self, dim: int, out_channels: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.fc = nn.Linear(dim, out_channels * patch_size**2)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """``(n, C)`` -> ``(n, p*p, out)`` ordered row-major inside each patch."""
        p = self.patch_size
        return self.fc(feats).view(-1, p * p, self.out_channels)


class WinWinModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        rope = cfg.rope_base if cfg.pos_embedding == "rope" else None
        self.patch_embed = nn.Linear(cfg.patch_size**2 * cfg.in_channels, d)
        self.encoder = nn.ModuleList(
            Block(d, cfg.n_heads, cfg.mlp_ratio, rope) for _ in range(cfg.n_encoder_blocks)
        )
        n_dec = cfg.n_decoder_blocks if cfg.task == "flow" else 0
        self.decoder = nn.ModuleList(
            DecoderBlock(d, cfg.n_heads, cfg.mlp_ratio, rope) for _ in range(n_dec)
        )
        self.head_norm = nn.LayerNorm(d)
        if cfg.head == "conv":
            self.head = ConvHead(d, cfg.head_channels or d, cfg.out_channels, cfg.patch_size)
        else:
            self.head = LinearHead(d, cfg.out_channels, cfg.patch_size)
        # not trained with the weights; see inference.finetune_temperatures
        self.tau = nn.Parameter(torch.ones(cfg.n_attention_layers, cfg.n_heads), requires_grad=False)
        if cfg.pos_embedding == "cosine_absolute":
            w, h = cfg.ref_grid
            self.register_buffer("pos_table", cosine_position_table(d, w, h), persistent=False)
        for blk in self.decoder:
            _init_matching(blk.cross_attn, cfg.match_init_gain)

    # -- token pipeline --

    def embed(self, images: torch.Tensor) -> tuple[torch.Tensor, TokenGrid]:
        images = (images - self.cfg.input_mean) / self.cfg.input_std
        patches, grid = patchify(images, self.cfg.patch_size)
        tokens = self.patch_embed(patches)
        if self.cfg.pos_embedding == "cosine_absolute":
            table = self.pos_table.to(tokens.dtype)
            if table.shape[1:] != (grid.height, grid.width):
                table = F.interpolate(
                    table[None], size=(grid.height, grid.width), mode="bilinear", align_corners=False
                )[0]
            tokens = tokens + table.flatten(1).T[None]
        return tokens, grid

    def encode(self, tokens, positions, tau=None):
        tau = self.tau if tau is None else tau
        for i, blk in enumerate(self.encoder):
            tokens = blk(tokens, positions, tau[i])
        return tokens

    def decode(self, x, pos, ctx, ctx_pos, tau=None):
        tau = self.tau if tau is None else tau
        off = self.cfg.n_encoder_blocks
        for i, blk in enumerate(self.decoder):
            x = blk(x, pos, ctx, ctx_pos, tau[off + 2 * i], tau[off + 2 * i + 1])
        return x

    def features(
        self,
        images: torch.Tensor,
        visible: Sequence[WindowSet],
        images2: torch.Tensor | None = None,
        visible2: Sequence[WindowSet] | None = None,
        tau: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, TokenGrid, np.ndarray]:
        """Encoder (+ decoder for pairs) output on the visible tokens of each sample.

        Every sample in the batch must expose the same number of tokens.
        Returns ``(features (B, n, D), grid, token index array (B, n))``.
        """
        tokens, grid = self.embed(images)
        idx = np.stack([token_indices(ws, grid) for ws in visible])
        feats, pos = _gather(tokens, idx, grid)
        feats = self.encode(feats, pos, tau)
        if self.cfg.task == "flow":
            if images2 is None or visible2 is None:
                raise ShapeMismatch("flow model needs a second frame")
            tokens2, grid2 = self.embed(images2)
            idx2 = np.stack([token_indices(ws, grid2) for ws in visible2])
            feats2, pos2 = _gather(tokens2, idx2, grid2)
            feats2 = self.encode(feats2, pos2, tau)
            feats = self.decode(feats, pos, feats2, pos2, tau)
        return self.head_norm(feats), grid, idx

    def predict_pixels(self, feats, grid, idx, visible: Sequence[WindowSet]):
        """Run the head; returns ``(pred (P, out), flat pixel ids (P,), sample ids (P,))``.

        Pixel ids index the row-major ``H*W`` image of the owning sample. With
        the conv head only window tokens produce outputs.
        """
        preds, pix, owner = [], [], []
        if isinstance(self.head, LinearHead):
            for b, ws in enumerate(visible):
                keep = _window_token_mask(ws, grid, idx[b])
                out = self.head(feats[b][torch.as_tensor(keep)])
                preds.append(out.reshape(-1, out.shape[-1]))
                pix.append(token_pixel_indices(idx[b][keep], grid).ravel())
                owner.append(np.full(out.shape[0] * out.shape[1], b))
        else:
            groups: dict[tuple[int, int], list] = {}
            for b, ws in enumerate(visible):
                maps = scatter_to_feature_maps(feats[b], ws, grid)
                for win, m in zip(ws.windows, maps):
                    groups.setdefault((win.h, win.w), []).append((b, win, m))
            for key in sorted(groups):
                items = groups[key]
                out = self.head(torch.stack([m for _, _, m in items]))
                for (b, win, _), o in zip(items, out):
                    preds.append(o.flatten(1).T)
                    pix.append(window_pixel_indices(win, grid))
                    owner.append(np.full(o.shape[1] * o.shape[2], b))
        pred = torch.cat(preds, dim=0)
        if self.cfg.task == "flow":
            # the head regresses displacement in token units
            pred = torch.cat([pred[:, :2] * grid.patch_size, pred[:, 2:]], dim=1)
        return (
            pred,
            torch.as_tensor(np.concatenate(pix)),
            torch.as_tensor(np.concatenate(owner)),
        )

    def forward(self, images, visible, images2=None, visible2=None, tau=None):
        feats, grid, idx = self.features(images, visible, images2, visible2, tau)
        return self.predict_pixels(feats, grid, idx, visible)

    def predict_dense(self, images, images2=None, tau=None) -> torch.Tensor:
        """Full-token forward; returns ``(B, out, H, W)``."""
        b, _, h, w = images.shape
        grid = TokenGrid.from_pixels(h, w, self.cfg.patch_size)
        full = [WindowSet((Window(0, 0, grid.width, grid.height),))] * b
        pred, pix, owner = self.forward(images, full, images2, full if images2 is not None else None, tau)
        dense = pred.new_zeros(b, h * w, pred.shape[1])
        dense[owner, pix] = pred
        return dense.transpose(1, 2).reshape(b, pred.shape[1], h, w)


def _gather(tokens: torch.Tensor, idx: np.ndarray, grid: TokenGrid):
    index = torch.as_tensor(idx, device=tokens.device)
    feats = torch.gather(tokens, 1, index[..., None].expand(-1, -1, tokens.shape[-1]))
    ys, xs = np.divmod(idx, grid.width)
    pos = torch.as_tensor(np.stack([xs, ys], axis=-1), dtype=tokens.dtype, device=tokens.device)
    return feats, pos


def _window_token_mask(ws: WindowSet, grid: TokenGrid, idx: np.ndarray) -> np.ndarray:
    if not ws.extra_tokens:
        return np.ones(idx.size, dtype=bool)
    extra = {y * grid.width + x for x, y in ws.extra_tokens}
    return np.array([i not in extra for i in idx])


def _init_matching(attn: MultiHeadAttention, gain: float):
    """Start cross-attention as a feature correlation: keys reuse the query projection.

    Matching tokens then score highest from the first step; with small random
    keys the soft-argmax offset carries no signal and flow training stalls.
    """
    dim = attn.q.weight.shape[1]
    with torch.no_grad():
        nn.init.normal_(attn.q.weight, std=gain / math.sqrt(dim))
        attn.q.bias.zero_()
        attn.kv.weight[:dim].copy_(attn.q.weight)
        attn.kv.bias[:dim].zero_()


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> WinWinModel:
    """Construct a model with weights drawn from a seed-local generator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = WinWinModel(cfg)
    return model.to(dtype)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
