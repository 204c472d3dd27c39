"""Deterministic toy datasets: layered-shape segmentation scenes and moving-layer
optical flow pairs with exact ground truth.

Images are float32 ``(H, W, 3)`` arrays in [0, 1]. Shapes and textures are
defined as continuous functions of the plane so the second flow frame can be
rendered exactly by pulling every pixel back through its layer's motion.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath

from .errors import InvalidSpec
from .flowguide import FlowField
from .geometry import as_rng

# -- shapes and textures -------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    """Ellipse (``kind='ellipse'``) or simple polygon in pixel coordinates."""

    kind: str
    center: tuple[float, float]
    radii: tuple[float, float] = (1.0, 1.0)
    angle: float = 0.0
    vertices: tuple[tuple[float, float], ...] = ()

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == "ellipse":
            cx, cy = self.center
            c, s = np.cos(self.angle), np.sin(self.angle)
            dx, dy = x - cx, y - cy
            a = (c * dx + s * dy) / self.radii[0]
            b = (-s * dx + c * dy) / self.radii[1]
            return a * a + b * b <= 1.0
        if self.kind == "polygon":
            pts = np.stack([np.ravel(x), np.ravel(y)], axis=1)
            inside = PolyPath(np.asarray(self.vertices)).contains_points(pts)
            return inside.reshape(np.shape(x))
        if self.kind == "full":
            return np.ones(np.shape(x), dtype=bool)
        raise InvalidSpec(f"unknown shape kind {self.kind!r}")

    @property
    def extent(self) -> float:
        """Radius of a disc around ``center`` containing the shape."""
        if self.kind == "ellipse":
            return max(self.radii)
        if self.kind == "polygon":
            v = np.asarray(self.vertices) - np.asarray(self.center)
            return float(np.hypot(v[:, 0], v[:, 1]).max())
        return float("inf")

    @property
    def width_span(self) -> float:
        if self.kind == "ellipse":
            c, s = np.cos(self.angle), np.sin(self.angle)
            return 2 * float(np.hypot(self.radii[0] * c, self.radii[1] * s))
        if self.kind == "polygon":
            xs = np.asarray(self.vertices)[:, 0]
            return float(xs.max() - xs.min())
        return float("inf")


@dataclass(frozen=True)
class Texture:
    """Base color plus a sum of oriented sinusoids, evaluated anywhere on the plane."""

    color: tuple[float, float, float]
    waves: tuple[tuple[float, float, float, float], ...] = ()  # (kx, ky, phase, amplitude)
    channel_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        val = np.zeros(np.shape(x))
        for kx, ky, ph, amp in self.waves:
            val = val + amp * np.sin(kx * x + ky * y + ph)
        rgb = np.asarray(self.color)[:, None] + np.asarray(self.channel_mix)[:, None] * val.ravel()[None]
        return np.clip(rgb.T.reshape(*np.shape(x), 3), 0.0, 1.0)


def random_texture(rng, n_waves=2, period=(6.0, 24.0), amplitude=(0.08, 0.2), color=None) -> Texture:
    color = tuple(rng.uniform(0.2, 0.8, 3)) if color is None else tuple(color)
    waves = []
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        k = 2 * np.pi / rng.uniform(*period)
        waves.append((k * np.cos(theta), k * np.sin(theta), rng.uniform(0, 2 * np.pi), rng.uniform(*amplitude)))
    mix = tuple(rng.uniform(0.5, 1.0, 3))
    return Texture(color, tuple(waves), mix)


def flow_texture(rng) -> Texture:
    """High-contrast quasi-random texture so that patches can be matched across frames."""
    return random_texture(rng, n_waves=8, period=(6.0, 32.0), amplitude=(0.15, 0.3))


def random_shape(rng, height: int, width: int, size=(0.08, 0.3), center=None) -> Shape:
    scale = min(height, width)
    cx, cy = center if center is not None else (rng.uniform(0, width), rng.uniform(0, height))
    if rng.random() < 0.5:
        r = rng.uniform(*size, 2) * scale
        return Shape("ellipse", (cx, cy), (float(r[0]), float(r[1])), float(rng.uniform(0, np.pi)))
    n = int(rng.integers(3, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(*size, n) * scale
    verts = tuple((float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(ang, rad))
    return Shape("polygon", (float(cx), float(cy)), vertices=verts)


def _pixel_grid(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


# -- segmentation ------------------------------------------------------------------


@dataclass
class SegSample:
    image: np.ndarray  # (H, W, 3) float32
    labels: np.ndarray  # (H, W) int64


def class_textures(k: int, seed: int = 7) -> list[Texture]:
    """Fixed per-class appearance shared by every sample of a k-class task."""
    rng = np.random.default_rng([seed, k])
    out = []
    for c in range(k):
        hue = (c + rng.uniform(-0.15, 0.15)) / k
        color = 0.5 + 0.3 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        out.append(random_texture(rng, n_waves=1, period=(5.0, 16.0), amplitude=(0.12, 0.2), color=color))
    return out


def render_seg_scene(
    height: int,
    width: int,
    background: int,
    shapes: list[tuple[Shape, int]],
    k_classes: int,
    seed=None,
    noise: float = 0.04,
    twin: bool = False,
) -> SegSample:
    """Paint ``shapes`` (bottom to top) over a background class.

    ``twin`` renders class 1 with class 0's appearance.
    """
    rng = as_rng(seed)
    tex = class_textures(k_classes)
    if twin:
        tex[1] = tex[0]
    xs, ys = _pixel_grid(height, width)
    labels = np.full((height, width), background, dtype=np.int64)
    for shape, cls in shapes:
        labels[shape.contains(xs, ys)] = cls
    image = np.zeros((height, width, 3))
    # per-sample jitter so a class is not identified by its exact color
    shift = rng.uniform(-0.06, 0.06, (k_classes, 3))
    if twin:
        shift[1] = shift[0]
    for c in np.unique(labels):
        m = labels == c
        image[m] = tex[c](xs[m], ys[m]) + shift[c]
    image += rng.normal(0.0, noise, image.shape)
    return SegSample(np.clip(image, 0, 1).astype(np.float32), labels)


def gen_seg_sample(
    res: tuple[int, int],
    k_classes: int,
    seed,
    n_shapes: int | None = None,
    context_pair: bool | None = None,
) -> SegSample:
    """Layered scene of 5-15 shapes; the first spans more than half the width.

    With ``context_pair`` (default when ``k_classes >= 4``) classes 0 and 1
    look identical and are told apart only by lying above (0) or below (1)
    the wide band, so labeling them needs long-range context. The band and the
    background then use the remaining classes.
    """
    if k_classes < 2:
        raise InvalidSpec("k_classes must be >= 2")
    if context_pair is None:
        context_pair = k_classes >= 4
    if context_pair and k_classes < 4:
        raise InvalidSpec("context_pair needs k_classes >= 4")
    height, width = res
    rng = as_rng(seed)
    n = int(rng.integers(5, 16)) if n_shapes is None else n_shapes
    low = 2 if context_pair else 0
    shapes = []
    band_y = height / 2
    if n > 0:
        # the wide shape is an elongated ellipse crossing the image
        cx, band_y = rng.uniform(0.35, 0.65) * width, rng.uniform(0.3, 0.7) * height
        rx = rng.uniform(0.3, 0.45) * width
        ry = rng.uniform(0.06, 0.12) * height
        big = Shape("ellipse", (cx, band_y), (rx, ry), float(rng.uniform(-0.2, 0.2)))
        shapes.append((big, int(rng.integers(low, k_classes))))
    for _ in range(n - 1):
        shape = random_shape(rng, height, width)
        if context_pair:
            # the pair only appears on shapes, so draw it more often to balance area
            cls = int(rng.integers(k_classes)) if rng.random() < 0.6 else 0
            if cls < 2:
                cls = 0 if shape.center[1] < band_y else 1
        else:
            cls = int(rng.integers(k_classes))
        shapes.append((shape, cls))
    background = int(rng.integers(low, k_classes))
    return render_seg_scene(height, width, background, shapes, k_classes, rng,
                            twin=context_pair)


# -- optical flow ----------------------------------------------------------------


@dataclass(frozen=True)
class Motion:
    """Affine map q = A p + b in pixel coordinates."""

    a: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    b: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Motion":
        return cls(b=(float(dx), float(dy)))

    @classmethod
    def rigid(cls, angle: float, center: tuple[float, float], t: tuple[float, float], scale: float = 1.0):
        c, s = scale * np.cos(angle), scale * np.sin(angle)
        a = np.array([[c, -s], [s, c]])
        ctr = np.asarray(center, dtype=float)
        b = ctr - a @ ctr + np.asarray(t, dtype=float)
        return cls(tuple(map(tuple, a.tolist())), tuple(b.tolist()))

    def apply(self, x, y):
        a = self.a
        return a[0][0] * x + a[0][1] * y + self.b[0], a[1][0] * x + a[1][1] * y + self.b[1]

    def inverse(self) -> "Motion":
        a = np.asarray(self.a)
        inv = np.linalg.inv(a)
        b = -inv @ np.asarray(self.b)
        return Motion(tuple(map(tuple, inv.tolist())), tuple(b.tolist()))


@dataclass(frozen=True)
class Layer:
    shape: Shape
    texture: Texture
    motion: Motion = field(default_factory=Motion)


@dataclass
class FlowSample:
    frame1: np.ndarray
    frame2: np.ndarray
    flow: FlowField


def _top_layer(layers: list[Layer], points_for_layer) -> np.ndarray:
    """Index of the topmost layer whose shape contains the (per-layer) point."""
    top = None
    for i, layer in enumerate(layers):
        x, y = points_for_layer(i)
        inside = layer.shape.contains(x, y)
        if top is None:
            top = np.zeros(np.shape(x), dtype=np.int64)
        top[inside] = i
    return top


def render_flow_scene(height: int, width: int, layers: list[Layer]) -> FlowSample:
    """Render both frames and the forward flow of a layered scene.

    ``layers[0]`` is the background and should cover the plane. Frame 2 is
    rendered by pulling each pixel back through each layer's inverse motion,
    so the flow is exact. Pixels whose endpoint leaves the frame or is covered
    by a different layer in frame 2 are invalid.
    """
    xs, ys = _pixel_grid(height, width)
    top1 = _top_layer(layers, lambda i: (xs, ys))
    frame1 = np.zeros((height, width, 3))
    u = np.zeros((height, width))
    v = np.zeros((height, width))
    for i, layer in enumerate(layers):
        m = top1 == i
        if not m.any():
            continue
        frame1[m] = layer.texture(xs[m], ys[m])
        qx, qy = layer.motion.apply(xs[m], ys[m])
        u[m] = qx - xs[m]
        v[m] = qy - ys[m]

    inverses = [layer.motion.inverse() for layer in layers]
    top2 = _top_layer(layers, lambda i: inverses[i].apply(xs, ys))
    frame2 = np.zeros((height, width, 3))
    for i, layer in enumerate(layers):
        m = top2 == i
        if m.any():
            px, py = inverses[i].apply(xs[m], ys[m])
            frame2[m] = layer.texture(px, py)

    ex, ey = xs + u, ys + v
    in_frame = (ex >= 0) & (ex <= width - 1) & (ey >= 0) & (ey <= height - 1)
    # the layer visible at the endpoint in frame 2 must be the one that moved there
    top_at_end = _top_layer(layers, lambda i: inverses[i].apply(ex, ey))
    valid = in_frame & (top_at_end == top1)
    return FlowSample(
        frame1.astype(np.float32), frame2.astype(np.float32), FlowField(u, v, valid)
    )


def _bounded_rigid(rng, center, extent, max_disp, rot=0.15, scale_jitter=0.0):
    angle = rng.uniform(-rot, rot)
    scale = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
    t = rng.normal(0, max_disp / 2, 2)
    # largest displacement over a disc of radius `extent`: |t| + |sA - I| * extent
    lin = np.hypot(scale * np.cos(angle) - 1, scale * np.sin(angle)) * extent
    peak = np.hypot(*t) + lin
    if peak > max_disp:
        f = max_disp / peak
        t = t * f
        angle *= f
        scale = 1 + (scale - 1) * f
    return Motion.rigid(float(angle), center, tuple(t), float(scale))


def gen_flow_sample(res: tuple[int, int], max_disp: float = 24.0, seed=None,
                    n_shapes: int | None = None) -> FlowSample:
    """Background under a global similarity motion plus 3-8 independently moving shapes."""
    height, width = res
    if max_disp >= min(height, width) / 2:
        raise InvalidSpec(f"max_disp {max_disp} must be below half the image size")
    rng = as_rng(seed)
    centre = (width / 2, height / 2)
    half_diag = float(np.hypot(width, height) / 2)
    bg = Layer(
        Shape("full", centre),
        flow_texture(rng),
        _bounded_rigid(rng, centre, half_diag, 0.5 * max_disp, rot=0.05, scale_jitter=0.05),
    )
    layers = [bg]
    n = int(rng.integers(3, 9)) if n_shapes is None else n_shapes
    for _ in range(n):
        shape = random_shape(rng, height, width, size=(0.08, 0.22))
        motion = _bounded_rigid(rng, shape.center, shape.extent, max_disp)
        layers.append(Layer(shape, flow_texture(rng), motion))
    return render_flow_scene(height, width, layers)


# -- datasets --------------------------------------------------------------------


def seg_dataset(n: int, res, k_classes: int, seed: int) -> list[SegSample]:
    return [gen_seg_sample(res, k_classes, np.random.default_rng([seed, i])) for i in range(n)]


def flow_dataset(n: int, res, max_disp: float, seed: int) -> list[FlowSample]:
    return [gen_flow_sample(res, max_disp, np.random.default_rng([seed, i])) for i in range(n)]


_MAGIC = b"WWDS"
_HEADER = struct.Struct("<4sIBIII")  # magic, version, kind, height, width, n_planes


def _planes(sample) -> tuple[int, list[np.ndarray]]:
    if isinstance(sample, SegSample):
        return 0, [sample.image[..., c] for c in range(3)] + [sample.labels]
    f = sample.flow
    return 1, (
        [sample.frame1[..., c] for c in range(3)]
        + [sample.frame2[..., c] for c in range(3)]
        + [f.u, f.v, f.valid]
    )


def write_record(sample, path: Path) -> None:
    kind, planes = _planes(sample)
    h, w = planes[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, kind, h, w, len(planes)))
        for p in planes:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_record(path: Path):
    data = Path(path).read_bytes()
    magic, version, kind, h, w, n = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise InvalidSpec(f"{path}: not a dataset record")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, h, w)
    if kind == 0:
        return SegSample(np.stack(arr[:3], -1).astype(np.float32), arr[3].astype(np.int64))
    flow = FlowField(arr[6].astype(np.float64), arr[7].astype(np.float64), arr[8] > 0.5)
    return FlowSample(np.stack(arr[:3], -1).copy(), np.stack(arr[3:6], -1).copy(), flow)


def write_dataset(samples, directory: Path) -> Path:
    """One binary record per sample plus ``index.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = directory / "index.csv"
    with open(index, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["file", "kind", "height", "width"])
        for i, s in enumerate(samples):
            name = f"{i:06d}.bin"
            write_record(s, directory / name)
            kind, planes = _planes(s)
            wr.writerow([name, "seg" if kind == 0 else "flow", *planes[0].shape])
    return index


def read_dataset(directory: Path) -> list:
    directory = Path(directory)
    with open(directory / "index.csv", newline="") as fh:
        return [read_record(directory / row["file"]) for row in csv.DictReader(fh)]


def seg_tensors(samples: list[SegSample]):
    """Stack samples into ``(N, 3, H, W)`` float images and ``(N, H, W)`` int64 labels."""
    import torch

    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = torch.from_numpy(np.stack([s.labels for s in samples]))
    return images, labels


def flow_tensors(samples: list[FlowSample]):
    """``(frame1, frame2, gt (N, H, W, 2), valid (N, H, W))`` tensors."""
    import torch

    f1 = torch.from_numpy(np.stack([s.frame1 for s in samples])).permute(0, 3, 1, 2).contiguous()
    f2 = torch.from_numpy(np.stack([s.frame2 for s in samples])).permute(0, 3, 1, 2).contiguous()
    gt = torch.from_numpy(np.stack([s.flow.stacked() for s in samples]).astype(np.float32))
    valid = torch.from_numpy(np.stack([s.flow.valid for s in samples]))
    return f1, f2, gt, valid
