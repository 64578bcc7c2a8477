"""Flat ``section.key = value`` experiment configuration.

Example::

    # desk-scale run
    data.source = synthetic
    data.seed = 0
    data.per_class = 40
    data.test_fraction = 0.5
    densenet.preset = toy
    xception.downsample_modules = 3
    train.epochs = 100
    train.learning_rate = 0.001
    output.dir = runs/seed0

Lists are comma separated. Architecture sections accept ``preset`` plus any
field of the corresponding spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .architectures import SPEC_TYPES, preset
from .errors import RoiEnsembleError, SpecError
from .training import TrainConfig

FAMILIES = ("densenet", "efficientnet", "xception")


class ConfigError(RoiEnsembleError, ValueError):
    def __init__(self, message, line=None, key=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


@dataclass
class DataConfig:
    source: str = "synthetic"
    seed: int = 0
    per_class: int = 40
    resolution: int = 16
    test_fraction: float = 0.5
    directory: Optional[str] = None
    annotations: Optional[str] = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    specs: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(text: str, template):
    """Convert ``text`` to the type of ``template`` (the current default value)."""
    if isinstance(template, bool):
        return _parse_bool(text)
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(t) if t.lstrip("-").isdigit() else float(t) for t in items)
    return text


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    data = DataConfig()
    train = TrainConfig()
    output_dir = ExperimentConfig.output_dir
    arch_lines: dict = {f: [] for f in FAMILIES}
    data_fields = {f.name: f for f in fields(DataConfig)}
    train_fields = {f.name for f in fields(TrainConfig)}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError("key must have the form section.key", lineno, key)
        section, name = key.split(".", 1)
        try:
            if section == "data":
                if name not in data_fields:
                    raise ConfigError("unknown data field", lineno, key)
                current = getattr(data, name)
                setattr(data, name, value if current is None else _coerce(value, current))
            elif section == "train":
                if name not in train_fields:
                    raise ConfigError("unknown train field", lineno, key)
                current = getattr(train, name)
                object.__setattr__(train, name, value if current is None else _coerce(value, current))
            elif section == "output":
                if name != "dir":
                    raise ConfigError("unknown output field", lineno, key)
                output_dir = value
            elif section in arch_lines:
                arch_lines[section].append((lineno, name, value))
            else:
                raise ConfigError(f"unknown section {section!r}", lineno, key)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), lineno, key) from None

    if data.source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {data.source!r}", key="data.source")
    if data.source == "directory" and not (data.directory and data.annotations):
        raise ConfigError("directory source needs data.directory and data.annotations", key="data.source")
    try:
        train = TrainConfig(**{f.name: getattr(train, f.name) for f in fields(TrainConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc), key="train") from None

    specs = {}
    for family, entries in arch_lines.items():
        specs[family] = _build_spec(family, entries, data.resolution)
    return ExperimentConfig(data=data, specs=specs, train=train, output_dir=output_dir)


def _build_spec(family: str, entries, resolution: int):
    scale = "toy"
    overrides, lines = {}, {}
    cls = SPEC_TYPES[family]
    defaults = {f.name: f.default for f in fields(cls)}
    for lineno, name, value in entries:
        if name == "preset":
            scale = value
            continue
        if name not in defaults:
            raise ConfigError(f"unknown {family} field", lineno, f"{family}.{name}")
        try:
            template = () if defaults[name] is None else defaults[name]
            overrides[name] = _coerce(value, template)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, f"{family}.{name}") from None
        lines[name] = lineno
    # patch resolution follows the data section unless set explicitly
    res_field = "base_resolution" if family == "efficientnet" else "resolution"
    if scale == "toy" and res_field not in overrides:
        overrides[res_field] = resolution
    try:
        return preset(family, scale, **overrides)
    except (SpecError, TypeError) as exc:
        raise ConfigError(str(exc), key=f"{family}") from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
