"""Second-frame window selection for binocular tasks.

The first-frame windows are drawn as in the monocular case. Each valid pixel
inside them votes for the second-frame token its flow endpoint lands in; the
vote map is perturbed with Gaussian noise and ``M`` windows are then picked
greedily on the largest window sums.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InfeasibleSpec, InvalidSpec, ShapeMismatch
from .geometry import (
    SamplerSpec,
    TokenGrid,
    Window,
    WindowSet,
    as_rng,
    sample,
    window_token_indices,
)


@dataclass(frozen=True)
class FlowField:
    """Dense forward flow in pixels with a validity mask, arrays shaped (H, W)."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.valid.shape) or self.u.ndim != 2:
            raise ShapeMismatch(
                f"flow planes disagree: u{self.u.shape} v{self.v.shape} valid{self.valid.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        z = np.zeros((height, width))
        return cls(z, z.copy(), np.ones((height, width), dtype=bool))

    @classmethod
    def constant(cls, height: int, width: int, du: float, dv: float) -> "FlowField":
        return cls(
            np.full((height, width), float(du)),
            np.full((height, width), float(dv)),
            np.ones((height, width), dtype=bool),
        )

    def stacked(self) -> np.ndarray:
        """(H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)


@dataclass(frozen=True)
class EndpointBinMap:
    counts: np.ndarray  # (grid.height, grid.width)
    grid: TokenGrid

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row,col,count\n")
        for r in range(self.counts.shape[0]):
            for c in range(self.counts.shape[1]):
                buf.write(f"{r},{c},{self.counts[r, c]:.17g}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class BinocularSamplerSpec:
    """Window sampling for an image pair.

    ``second_mode`` is ``guided`` (flow-guided greedy selection) or ``same``
    (reuse the first-frame windows). ``first`` optionally overrides the
    first-frame sampler, e.g. random tokens; by default it is ``n_first``
    windows of ``shape_first``.
    """

    n_first: int = 2
    shape_first: tuple[int, int] = (10, 10)
    m_second: int = 4
    shape_second: tuple[int, int] = (7, 7)
    std_ratio: float = 0.3
    second_mode: str = "guided"
    first: SamplerSpec | None = None

    def first_spec(self) -> SamplerSpec:
        if self.first is not None:
            return self.first
        if self.n_first == 1:
            return SamplerSpec.crop(*self.shape_first)
        return SamplerSpec.windows(self.n_first, *self.shape_first)

    def validate(self, grid1: TokenGrid, grid2: TokenGrid) -> None:
        if self.std_ratio < 0:
            raise InvalidSpec("std_ratio must be >= 0")
        if self.second_mode not in ("guided", "same"):
            raise InvalidSpec(f"unknown second_mode {self.second_mode!r}")
        self.first_spec().validate(grid1)
        if self.second_mode == "guided":
            w, h = self.shape_second
            if w > grid2.width or h > grid2.height:
                raise InvalidSpec(f"second-frame shape {self.shape_second} does not fit {grid2}")
            if self.m_second * w * h > grid2.n_tokens:
                raise InvalidSpec("second-frame budget exceeds the grid")


def bin_flow_endpoints(
    flow: FlowField, first_windows: WindowSet, grid1: TokenGrid, grid2: TokenGrid
) -> EndpointBinMap:
    """Count, per second-frame token, the in-window valid pixels landing in it."""
    if flow.shape != (grid1.pixel_height, grid1.pixel_width):
        raise ShapeMismatch(
            f"flow {flow.shape} does not match grid {grid1.pixel_height}x{grid1.pixel_width}"
        )
    p1 = grid1.patch_size
    tok = window_token_indices(first_windows, grid1)
    ty, tx = np.divmod(tok, grid1.width)
    oy, ox = np.divmod(np.arange(p1 * p1), p1)
    ys = (ty[:, None] * p1 + oy[None, :]).ravel()
    xs = (tx[:, None] * p1 + ox[None, :]).ravel()
    keep = flow.valid[ys, xs]
    ys, xs = ys[keep], xs[keep]
    ex = np.floor(xs + flow.u[ys, xs]).astype(np.int64)
    ey = np.floor(ys + flow.v[ys, xs]).astype(np.int64)
    inside = (ex >= 0) & (ex < grid2.pixel_width) & (ey >= 0) & (ey < grid2.pixel_height)
    bx = ex[inside] // grid2.patch_size
    by = ey[inside] // grid2.patch_size
    counts = np.bincount(by * grid2.width + bx, minlength=grid2.n_tokens).astype(np.float64)
    return EndpointBinMap(counts.reshape(grid2.height, grid2.width), grid2)


def perturb_counts(bins: EndpointBinMap, std_ratio: float, seed=None) -> EndpointBinMap:
    """Add noise drawn from N(mean(bins), std_ratio * std(bins)) to every bin."""
    if std_ratio < 0:
        raise InvalidSpec("std_ratio must be >= 0")
    mean = float(bins.counts.mean())
    scale = std_ratio * float(bins.counts.std())
    if scale == 0.0:
        return EndpointBinMap(bins.counts + mean, bins.grid)
    noise = as_rng(seed).normal(mean, scale, size=bins.counts.shape)
    return EndpointBinMap(bins.counts + noise, bins.grid)


def window_sums(counts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum of ``counts`` under every placement of a (w, h) window, indexed [y0, x0]."""
    w, h = shape
    return sliding_window_view(counts, (h, w)).sum(axis=(-2, -1))


def greedy_select(bins: EndpointBinMap, m: int, shape: tuple[int, int]) -> WindowSet:
    """Pick ``m`` disjoint windows one at a time, each maximizing its bin sum.

    Ties go to the smallest (y0, x0).
    """
    w, h = shape
    grid = bins.grid
    if w > grid.width or h > grid.height:
        raise InfeasibleSpec(f"window {w}x{h} does not fit {grid}")
    sums = window_sums(bins.counts, shape)
    free = np.ones_like(sums, dtype=bool)
    chosen: list[Window] = []
    for _ in range(m):
        if not free.any():
            raise InfeasibleSpec(f"only {len(chosen)} of {m} disjoint {w}x{h} windows fit")
        masked = np.where(free, sums, -np.inf)
        y0, x0 = np.unravel_index(int(np.argmax(masked)), masked.shape)
        win = Window(int(x0), int(y0), w, h)
        chosen.append(win)
        # block every corner whose window would intersect the new one
        free[max(0, y0 - h + 1) : y0 + h, max(0, x0 - w + 1) : x0 + w] = False
    return WindowSet(tuple(chosen))


def same_windows_second_frame(
    first_windows: WindowSet, grid1: TokenGrid, grid2: TokenGrid
) -> WindowSet:
    if grid1 != grid2:
        raise ShapeMismatch(f"frame grids differ: {grid1} vs {grid2}")
    return WindowSet(first_windows.windows, first_windows.extra_tokens)


def sample_second_frame_windows(
    flow: FlowField,
    first_windows: WindowSet,
    spec: BinocularSamplerSpec,
    grid1: TokenGrid,
    grid2: TokenGrid,
    seed=None,
) -> WindowSet:
    """Flow-guided selection: bin endpoints, perturb, then greedy pick."""
    bins = bin_flow_endpoints(flow, first_windows, grid1, grid2)
    noisy = perturb_counts(bins, spec.std_ratio, seed)
    return greedy_select(noisy, spec.m_second, spec.shape_second)


def sample_pair(
    flow: FlowField,
    spec: BinocularSamplerSpec,
    grid1: TokenGrid,
    grid2: TokenGrid,
    seed=None,
) -> tuple[WindowSet, WindowSet]:
    """Draw first- and second-frame visible sets for one training pair."""
    rng = as_rng(seed)
    first = sample(grid1, spec.first_spec(), rng)
    if spec.second_mode == "same":
        return first, same_windows_second_frame(first, grid1, grid2)
    return first, sample_second_frame_windows(flow, first, spec, grid1, grid2, rng)


def render_bins_ascii(bins: EndpointBinMap) -> str:
    """Coarse 10-level rendering of a bin map, ``.`` for empty bins."""
    c = bins.counts
    top = c.max() if c.size and c.max() > 0 else 1.0
    rows = []
    for r in range(c.shape[0]):
        row = ""
        for v in c[r]:
            row += "." if v <= 0 else str(min(9, int(9 * v / top)))
        rows.append(row)
    return "\n".join(rows) + "\n"
