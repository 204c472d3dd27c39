"""Experiment description and its flat ``section.key = value`` text form.

Example::

    run.task = segmentation
    run.seed = 0
    model.embed_dim = 64
    sampler.window_shape = 6,6
    train.epochs = 20

Tuples are comma-separated, booleans are ``true``/``false``, and ``none``
marks an unset optional value. Unknown keys and unparsable values raise
``InvalidSpec`` naming the offending key.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidSpec
from .flowguide import BinocularSamplerSpec
from .geometry import SamplerSpec
from .model import ModelConfig
from .train import TrainConfig

RUN_ROOT_ENV = "WINWIN_RUN_ROOT"


@dataclass
class RunSection:
    task: str = "segmentation"
    seed: int = 0
    name: str = "run"
    root: str = "runs"


@dataclass
class DataConfig:
    n_train: int = 256
    n_val: int = 64
    resolution: tuple[int, int] = (128, 128)  # (H, W) pixels
    k_classes: int = 6
    max_disp: float = 16.0
    seed: int = 1000


@dataclass
class EvalConfig:
    strategy: str = "direct"  # direct | resize | tiling
    train_res: tuple[int, int] = (0, 0)  # (H, W) for resize; zeros mean the crop size
    tile_crop: tuple[int, int] = (0, 0)  # (H, W) for tiling; zeros mean the crop size
    overlap: float = 0.5
    calibrate: bool = False
    sweep_lo: float = 0.8
    sweep_hi: float = 2.0
    sweep_step: float = 0.02
    calib_subset: int = 32
    finetune_steps: int = 0
    finetune_lr: float = 0.05


# fields of TrainConfig that live in other sections
_TRAIN_SKIP = {"task", "seed", "sampler", "binocular"}
# BinocularSamplerSpec.first is expressed through this flag and the sampler section
_BINO_SKIP = {"first"}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec.windows(2, 6, 6))
    binocular: BinocularSamplerSpec = field(default_factory=BinocularSamplerSpec)
    binocular_first_from_sampler: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived views --

    def binocular_spec(self) -> BinocularSamplerSpec:
        if self.binocular_first_from_sampler:
            return dataclasses.replace(self.binocular, first=self.sampler)
        return self.binocular

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(
            self.train,
            task=self.run.task,
            seed=self.run.seed,
            sampler=self.sampler,
            binocular=self.binocular_spec(),
        )

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, task=self.run.task)

    def run_dir(self) -> Path:
        root = os.environ.get(RUN_ROOT_ENV) or self.run.root
        return Path(root) / self.run.name

    # -- text form --

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section, obj, skip in self._sections():
            for f in dataclasses.fields(obj):
                if f.name not in skip:
                    out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        out.append(("binocular.first_from_sampler", self.binocular_first_from_sampler))
        return out

    def _sections(self):
        return [
            ("run", self.run, set()),
            ("model", self.model, {"task"}),
            ("sampler", self.sampler, set()),
            ("binocular", self.binocular, _BINO_SKIP),
            ("train", self.train, _TRAIN_SKIP),
            ("data", self.data, set()),
            ("eval", self.eval, set()),
        ]

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpec(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            pairs.append((key, value))
        for ov in overrides or []:
            if "=" not in ov:
                raise InvalidSpec(f"override {ov!r}: expected key=value")
            key, value = (p.strip() for p in ov.split("=", 1))
            pairs.append((key, value))
        return cls().with_values(pairs)

    def with_values(self, pairs) -> "RunConfig":
        """Copy with ``(dotted key, text value)`` pairs applied in order."""
        updates: dict[str, dict[str, object]] = {}
        flag = self.binocular_first_from_sampler
        sections = {name: (obj, skip) for name, obj, skip in self._sections()}
        for key, text in pairs:
            if key == "binocular.first_from_sampler":
                flag = parse_value(text, bool, key)
                continue
            section, _, name = key.partition(".")
            if section not in sections:
                raise InvalidSpec(f"{key}: unknown section {section!r}")
            obj, skip = sections[section]
            hints = typing.get_type_hints(type(obj))
            if name in skip or name not in hints:
                raise InvalidSpec(f"{key}: unknown key")
            updates.setdefault(section, {})[name] = parse_value(text, hints[name], key)
        kwargs = {"binocular_first_from_sampler": flag}
        for section, (obj, _) in sections.items():
            try:
                kwargs[section] = dataclasses.replace(obj, **updates.get(section, {}))
            except (InvalidSpec, TypeError, ValueError) as exc:
                raise InvalidSpec(f"{section}: {exc}") from exc
        return RunConfig(**kwargs)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, hint, key: str = "value"):
    """Parse ``text`` according to a resolved type hint."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType):
            if text.lower() == "none" and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return parse_value(text, inner[0], key)
        if origin is tuple:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(parse_value(p, args[0], key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(parse_value(p, a, key) for p, a in zip(parts, args))
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true or false")
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError as exc:
        raise InvalidSpec(f"{key}: cannot parse {text!r} ({exc})") from exc
    raise InvalidSpec(f"{key}: unsupported field type {hint!r}")
