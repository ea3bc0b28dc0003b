"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..data import SHAPE_NAMES, DatasetSpec
from ..geometry import DEFAULT_THRESHOLD, DEFAULT_TOP_N
from ..head import HeadConfig
from ..losses import LossWeights


class ConfigError(ValueError):
    """Unknown key, unparsable value, or inconsistent settings."""


@dataclass
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr_drops: tuple[int, ...] = (8, 14)
    lr_factor: float = 0.2
    seed: int = 0
    output_dir: str = "runs/default"
    log_interval: int = 10
    checkpoint_every_epoch: bool = True


@dataclass
class EvalConfig:
    seed: int = 0
    start: int = 1_000_000
    size: int = 200
    threshold: float = 0.05
    top_n: int = DEFAULT_TOP_N
    detect_threshold: float = DEFAULT_THRESHOLD


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(flip_prob=0.5, scale_range=(0.85, 1.15),
                                                                  color_jitter=0.1))
    eval: EvalConfig = field(default_factory=EvalConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: AdamConfig = field(default_factory=AdamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.head.image_size != self.data.image_size:
            raise ConfigError(f"head.image_size {self.head.image_size} != data.image_size {self.data.image_size}")
        if self.data.kind == "synthetic" and self.head.K != self.data.K:
            raise ConfigError(f"head.K {self.head.K} != data.K {self.data.K}")
        if not self.class_names and self.data.kind == "synthetic":
            self.class_names = SHAPE_NAMES[: self.data.K]
        self.class_names = tuple(self.class_names)

    @classmethod
    def coco_defaults(cls, path: str) -> "RunConfig":
        """The 80-class, 5x5-kernel schedule: 40 epochs, drops at 5/15/25, batch 12."""
        return cls(data=DatasetSpec(kind="coco_json", path=path, K=80, image_size=128, flip_prob=0.5,
                                    scale_range=(0.6, 1.3), color_jitter=0.2),
                   head=HeadConfig(K=80, k=5, image_size=128),
                   train=TrainConfig(epochs=40, batch_size=12, lr_drops=(5, 15, 25)))


SECTIONS = ("data", "eval", "head", "loss", "optim", "train")


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            args = typing.get_args(typ)
            elem = args[0]
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            return tuple(_parse_value(p, elem, key) for p in parts)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from e
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(obj) -> dict[str, type]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def parse_assignments(pairs: list[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    """Apply ``(section.key, value)`` pairs on top of ``base`` (or defaults)."""
    base = base or RunConfig()
    sections = {name: dataclasses.asdict(getattr(base, name)) for name in SECTIONS}
    top = {"class_names": base.class_names}
    types = {name: _field_types(getattr(base, name)) for name in SECTIONS}
    for key, raw in pairs:
        if key == "class_names":
            top["class_names"] = tuple(s.strip() for s in raw.split(",") if s.strip())
            continue
        section, _, name = key.partition(".")
        if section not in sections or name not in types[section]:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _parse_value(raw, types[section][name], key)
    try:
        return RunConfig(
            data=DatasetSpec(**sections["data"]),
            eval=EvalConfig(**sections["eval"]),
            head=HeadConfig(**sections["head"]),
            loss=LossWeights(**sections["loss"]),
            optim=AdamConfig(**sections["optim"]),
            train=TrainConfig(**sections["train"]),
            class_names=top["class_names"],
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_config_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    try:
        return parse_assignments(pairs, base)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_config_text(text, source=str(path))


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        for f in dataclasses.fields(obj):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(obj, f.name))}")
    lines.append(f"class_names = {_format_value(tuple(cfg.class_names))}")
    return "\n".join(lines) + "\n"
