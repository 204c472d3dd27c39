"""Token lattice arithmetic and window samplers.

All coordinates are in token units. ``x`` is the column, ``y`` the row, and
flat token indices are row-major: ``idx = y * width + x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleSpec, InvalidSpec, ShapeMismatch

MAX_PLACEMENT_ATTEMPTS = 100
MAX_SHAPE_DRAWS = 100

SAMPLER_MODES = (
    "multi_window",
    "randomized_window",
    "windows_plus_extra",
    "random_tokens",
    "single_crop",
    "full",
)


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed, ``None`` or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class TokenGrid:
    width: int
    height: int
    patch_size: int = 1

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.patch_size <= 0:
            raise InvalidSpec(f"grid dimensions must be positive, got {self}")

    @classmethod
    def from_pixels(cls, height: int, width: int, patch_size: int) -> "TokenGrid":
        if height % patch_size or width % patch_size:
            raise ShapeMismatch(
                f"image {height}x{width} is not divisible by patch size {patch_size}"
            )
        return cls(width // patch_size, height // patch_size, patch_size)

    @property
    def n_tokens(self) -> int:
        return self.width * self.height

    @property
    def pixel_height(self) -> int:
        return self.height * self.patch_size

    @property
    def pixel_width(self) -> int:
        return self.width * self.patch_size

    def positions(self) -> np.ndarray:
        """(n_tokens, 2) array of (x, y) coordinates in row-major order."""
        ys, xs = np.divmod(np.arange(self.n_tokens), self.width)
        return np.stack([xs, ys], axis=1)


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.y0, self.x0, self.h, self.w)

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    def overlaps(self, other: "Window") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def fits(self, grid: TokenGrid) -> bool:
        return (
            self.w >= 1
            and self.h >= 1
            and self.x0 >= 0
            and self.y0 >= 0
            and self.x1 <= grid.width
            and self.y1 <= grid.height
        )

    def indices(self, grid: TokenGrid) -> np.ndarray:
        """Row-major flat indices of the tokens covered by the window."""
        ys = np.arange(self.y0, self.y1)[:, None]
        xs = np.arange(self.x0, self.x1)[None, :]
        return (ys * grid.width + xs).ravel()


@dataclass(frozen=True)
class WindowSet:
    """Disjoint windows plus optional isolated extra tokens.

    Extra tokens are fed to the encoder but are never scattered to the
    convolutional head nor supervised.
    """

    windows: tuple[Window, ...]
    extra_tokens: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(sorted(self.windows, key=lambda w: w.sort_key)))
        object.__setattr__(
            self, "extra_tokens", tuple(sorted(self.extra_tokens, key=lambda t: (t[1], t[0])))
        )

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @property
    def n_window_tokens(self) -> int:
        return sum(w.area for w in self.windows)

    @property
    def n_tokens(self) -> int:
        return self.n_window_tokens + len(self.extra_tokens)

    @property
    def conv_compatible(self) -> bool:
        """False for sets a 3x3 convolutional head cannot process (e.g. random tokens)."""
        return all(min(w.w, w.h) >= 3 for w in self.windows)

    def validate(self, grid: TokenGrid) -> None:
        for w in self.windows:
            if not w.fits(grid):
                raise InvalidSpec(f"{w} does not fit {grid}")
        for i, a in enumerate(self.windows):
            for b in self.windows[i + 1 :]:
                if a.overlaps(b):
                    raise InvalidSpec(f"windows {a} and {b} overlap")
        seen = set()
        for x, y in self.extra_tokens:
            if not (0 <= x < grid.width and 0 <= y < grid.height):
                raise InvalidSpec(f"extra token {(x, y)} outside {grid}")
            if any(w.contains(x, y) for w in self.windows):
                raise InvalidSpec(f"extra token {(x, y)} lies inside a window")
            if (x, y) in seen:
                raise InvalidSpec(f"duplicate extra token {(x, y)}")
            seen.add((x, y))

    def to_text(self) -> str:
        lines = [f"win {w.x0} {w.y0} {w.w} {w.h}" for w in self.windows]
        lines += [f"tok {x} {y}" for x, y in self.extra_tokens]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WindowSet":
        windows, extra = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "win" and len(parts) == 5:
                    x0, y0, w, h = map(int, parts[1:])
                    windows.append(Window(x0, y0, w, h))
                elif parts[0] == "tok" and len(parts) == 3:
                    extra.append((int(parts[1]), int(parts[2])))
                else:
                    raise ValueError(line)
            except ValueError as exc:
                raise InvalidSpec(f"line {lineno}: cannot parse {line!r}") from exc
        return cls(tuple(windows), tuple(extra))


def token_indices(ws: WindowSet, grid: TokenGrid) -> np.ndarray:
    """Sorted, duplicate-free flat indices of every token in ``ws``."""
    parts = [w.indices(grid) for w in ws.windows]
    if ws.extra_tokens:
        extra = np.asarray(ws.extra_tokens, dtype=np.int64)
        parts.append(extra[:, 1] * grid.width + extra[:, 0])
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(parts)).astype(np.int64)


def window_token_indices(ws: WindowSet, grid: TokenGrid) -> np.ndarray:
    """Like :func:`token_indices` but without the extra tokens."""
    return token_indices(WindowSet(ws.windows), grid)


@dataclass(frozen=True)
class SamplerSpec:
    """How to draw the visible token set of one training image.

    ``window_shape`` is (w, h). For ``randomized_window`` the shapes come from
    ``budget_range``, ``n_windows_choices``, ``token_ratio_range`` and
    ``aspect_range`` instead; a range with ``lo == hi`` is deterministic.
    """

    mode: str = "multi_window"
    n_windows: int = 2
    window_shape: tuple[int, int] = (22, 22)
    budget_range: tuple[int, int] = (1024, 1024)
    n_windows_choices: tuple[int, ...] = (2,)
    token_ratio_range: tuple[float, float] = (1.0, 1.0)
    aspect_range: tuple[float, float] = (1.0, 1.0)
    n_extra_tokens: int = 0
    n_random_tokens: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise InvalidSpec(f"unknown sampler mode {self.mode!r}")

    @classmethod
    def windows(cls, n: int, w: int, h: int | None = None) -> "SamplerSpec":
        return cls(mode="multi_window", n_windows=n, window_shape=(w, w if h is None else h))

    @classmethod
    def crop(cls, w: int, h: int | None = None) -> "SamplerSpec":
        return cls(mode="single_crop", n_windows=1, window_shape=(w, w if h is None else h))

    @classmethod
    def full(cls) -> "SamplerSpec":
        return cls(mode="full")

    def token_budget(self, grid: TokenGrid) -> int:
        """Upper bound on the number of visible tokens this spec requests."""
        if self.mode == "full":
            return grid.n_tokens
        if self.mode == "random_tokens":
            return self.n_random_tokens
        if self.mode == "randomized_window":
            return self.budget_range[1]
        n = 1 if self.mode == "single_crop" else self.n_windows
        budget = n * self.window_shape[0] * self.window_shape[1]
        if self.mode == "windows_plus_extra":
            budget += self.n_extra_tokens
        return budget

    def validate(self, grid: TokenGrid) -> None:
        if self.token_budget(grid) > grid.n_tokens:
            raise InvalidSpec(
                f"budget {self.token_budget(grid)} exceeds {grid.n_tokens} tokens"
            )
        if self.mode in ("multi_window", "windows_plus_extra", "single_crop"):
            w, h = self.window_shape
            if w < 1 or h < 1 or w > grid.width or h > grid.height:
                raise InvalidSpec(f"window shape {self.window_shape} does not fit {grid}")
            if self.mode != "single_crop" and self.n_windows < 1:
                raise InvalidSpec("n_windows must be >= 1")
        if self.mode == "randomized_window":
            lo, hi = self.budget_range
            if not 1 <= lo <= hi:
                raise InvalidSpec(f"empty budget range {self.budget_range}")
            if not self.n_windows_choices or min(self.n_windows_choices) < 1:
                raise InvalidSpec("n_windows_choices must be non-empty and positive")
            if self.token_ratio_range[0] > self.token_ratio_range[1]:
                raise InvalidSpec(f"empty token ratio range {self.token_ratio_range}")
            alo, ahi = self.aspect_range
            if not 0 < alo <= ahi:
                raise InvalidSpec(f"bad aspect range {self.aspect_range}")
        if self.n_extra_tokens < 0 or self.n_random_tokens < 0:
            raise InvalidSpec("token counts must be non-negative")


# -- placement ---------------------------------------------------------------


def _place(
    grid: TokenGrid, shapes: Sequence[tuple[int, int]], rng: np.random.Generator
) -> list[Window]:
    """Place windows of the given (w, h) shapes without overlap.

    Top-left corners are drawn uniformly over the in-grid positions and
    rejected on overlap, up to ``MAX_PLACEMENT_ATTEMPTS`` per window. After
    that, a row-major first-fit scan takes over.
    """
    placed: list[Window] = []
    for w, h in shapes:
        if w > grid.width or h > grid.height:
            raise InfeasibleSpec(f"window {w}x{h} does not fit {grid}")
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x0 = int(rng.integers(0, grid.width - w + 1))
            y0 = int(rng.integers(0, grid.height - h + 1))
            cand = Window(x0, y0, w, h)
            if not any(cand.overlaps(p) for p in placed):
                placed.append(cand)
                break
        else:
            cand = _first_fit(grid, w, h, placed)
            if cand is None:
                return _pack_all(grid, shapes)
            placed.append(cand)
    return placed


def _first_fit(grid: TokenGrid, w: int, h: int, placed: Iterable[Window]) -> Window | None:
    placed = list(placed)
    for y0 in range(grid.height - h + 1):
        for x0 in range(grid.width - w + 1):
            cand = Window(x0, y0, w, h)
            if not any(cand.overlaps(p) for p in placed):
                return cand
    return None


def _pack_all(grid: TokenGrid, shapes: Sequence[tuple[int, int]]) -> list[Window]:
    """Deterministic left-to-right packing from an empty grid, largest first."""
    placed: list[Window] = []
    for w, h in sorted(shapes, key=lambda s: (-s[0] * s[1], -s[1], -s[0])):
        cand = _first_fit(grid, w, h, placed)
        if cand is None:
            raise InfeasibleSpec(f"cannot pack windows {list(shapes)} into {grid}")
        placed.append(cand)
    return placed


# -- samplers ----------------------------------------------------------------


def sample_windows(grid: TokenGrid, spec: SamplerSpec, seed=None) -> WindowSet:
    """Draw the disjoint windows of one training image."""
    spec.validate(grid)
    rng = as_rng(seed)
    if spec.mode == "full":
        return WindowSet((Window(0, 0, grid.width, grid.height),))
    if spec.mode == "randomized_window":
        return sample_randomized_windows(grid, spec, rng)
    if spec.mode == "single_crop":
        shapes = [spec.window_shape]
    elif spec.mode in ("multi_window", "windows_plus_extra"):
        shapes = [spec.window_shape] * spec.n_windows
    else:
        raise InvalidSpec(f"sample_windows does not handle mode {spec.mode!r}")
    return WindowSet(tuple(_place(grid, shapes, rng)))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    # zero-width ranges consume no randomness so degenerate specs reproduce
    # the fixed-shape sampler draw for draw
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _shape_for_area(area: float, aspect: float, grid: TokenGrid, alo: float, ahi: float):
    w = max(1, round(math.sqrt(area * aspect)))
    h = max(1, round(math.sqrt(area / aspect)))
    w = min(w, grid.width, int(math.floor(h * ahi)) or 1)
    h = min(h, grid.height, int(math.floor(w / alo)) or 1)
    return w, h


def _last_shape(target: int, aspect: float, grid: TokenGrid, alo: float, ahi: float,
                total_lo: int, total_hi: int, used: int):
    """Shape for the final window so the total lands inside the budget range."""
    best, best_key = None, None
    for h in range(1, grid.height + 1):
        for w in {max(1, target // h), max(1, -(-target // h))}:
            if w > grid.width or not alo <= w / h <= ahi:
                continue
            if not total_lo <= used + w * h <= total_hi:
                continue
            key = (abs(w * h - target), abs(math.log((w / h) / aspect)), h)
            if best_key is None or key < best_key:
                best, best_key = (w, h), key
    return best


def draw_randomized_shapes(grid: TokenGrid, spec: SamplerSpec, rng) -> list[tuple[int, int]]:
    """Window shapes for one randomized draw (budget, count, size ratio, aspect)."""
    rng = as_rng(rng)
    blo, bhi = spec.budget_range
    alo, ahi = spec.aspect_range
    rlo, rhi = spec.token_ratio_range
    for _ in range(MAX_SHAPE_DRAWS):
        budget = blo if blo == bhi else int(rng.integers(blo, bhi + 1))
        choices = spec.n_windows_choices
        n = choices[0] if len(choices) == 1 else int(rng.choice(choices))
        # relative sizes: each window is at most rhi times the average size
        for _ in range(MAX_SHAPE_DRAWS):
            raw = np.array([_uniform(rng, max(rlo, 1e-3), max(rhi, 1e-3)) for _ in range(n)])
            rel = raw / raw.mean()
            if rel.max() <= max(rhi, 1.0) + 1e-12 and rel.min() >= rlo - 1e-12:
                break
        areas = budget * rel / n
        aspects = [
            math.exp(_uniform(rng, math.log(alo), math.log(ahi))) for _ in range(n)
        ]
        shapes = [_shape_for_area(a, r, grid, alo, ahi) for a, r in zip(areas[:-1], aspects[:-1])]
        used = sum(w * h for w, h in shapes)
        last = _last_shape(
            int(round(budget - used)), aspects[-1], grid, alo, ahi, blo, bhi, used
        )
        if last is not None and all(s[0] * s[1] >= 1 for s in shapes):
            return shapes + [last]
    raise InfeasibleSpec(f"no window shapes satisfy {spec} on {grid}")


def sample_randomized_windows(grid: TokenGrid, spec: SamplerSpec, seed=None) -> WindowSet:
    spec.validate(grid)
    rng = as_rng(seed)
    for _ in range(MAX_SHAPE_DRAWS):
        shapes = draw_randomized_shapes(grid, spec, rng)
        try:
            return WindowSet(tuple(_place(grid, shapes, rng)))
        except InfeasibleSpec:
            continue
    raise InfeasibleSpec(f"could not place randomized windows for {spec} on {grid}")


def sample_extra_tokens(grid: TokenGrid, windows: WindowSet, k: int, seed=None) -> WindowSet:
    """Add ``k`` isolated tokens drawn uniformly outside every window."""
    if k == 0:
        return windows
    inside = np.zeros(grid.n_tokens, dtype=bool)
    inside[window_token_indices(windows, grid)] = True
    if windows.extra_tokens:
        ex = np.asarray(windows.extra_tokens)
        inside[ex[:, 1] * grid.width + ex[:, 0]] = True
    outside = np.flatnonzero(~inside)
    if k < 0 or k > outside.size:
        raise InvalidSpec(f"cannot draw {k} extra tokens from {outside.size} free tokens")
    rng = as_rng(seed)
    chosen = np.sort(rng.choice(outside, size=k, replace=False))
    extra = tuple((int(i % grid.width), int(i // grid.width)) for i in chosen)
    return replace(windows, extra_tokens=windows.extra_tokens + extra)


def sample_random_tokens(grid: TokenGrid, k: int, seed=None) -> WindowSet:
    """``k`` distinct tokens as 1x1 windows; only usable with a linear head."""
    if k < 0 or k > grid.n_tokens:
        raise InvalidSpec(f"cannot draw {k} tokens from a grid of {grid.n_tokens}")
    rng = as_rng(seed)
    chosen = np.sort(rng.choice(grid.n_tokens, size=k, replace=False))
    return WindowSet(
        tuple(Window(int(i % grid.width), int(i // grid.width), 1, 1) for i in chosen)
    )


def sample(grid: TokenGrid, spec: SamplerSpec, seed=None) -> WindowSet:
    """Dispatch on ``spec.mode`` to the matching sampler."""
    rng = as_rng(seed)
    if spec.mode == "random_tokens":
        spec.validate(grid)
        return sample_random_tokens(grid, spec.n_random_tokens, rng)
    ws = sample_windows(grid, spec, rng)
    if spec.mode == "windows_plus_extra":
        ws = sample_extra_tokens(grid, ws, spec.n_extra_tokens, rng)
    return ws


def full_window_set(grid: TokenGrid) -> WindowSet:
    return WindowSet((Window(0, 0, grid.width, grid.height),))


def render_ascii(ws: WindowSet, grid: TokenGrid) -> str:
    """One character per token: window letter, ``*`` for extra tokens, ``.`` otherwise."""
    canvas = [["."] * grid.width for _ in range(grid.height)]
    for i, w in enumerate(ws.windows):
        ch = chr(ord("A") + i % 26)
        for y in range(w.y0, w.y1):
            for x in range(w.x0, w.x1):
                canvas[y][x] = ch
    for x, y in ws.extra_tokens:
        canvas[y][x] = "*"
    return "\n".join("".join(row) for row in canvas) + "\n"
