"""Xception-like, DenseNet-like and EfficientNet-like classifiers.

Each family has a declarative spec (a frozen dataclass), a builder that turns
the spec plus an integer seed into a ``Model``, and two presets: ``toy``
(a few thousand parameters on 16x16 patches, used for all experiments here)
and ``paper`` (full-size published layouts, only meant to be built and counted).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecError
from .layers import ChannelNorm, Conv2d, Linear, Module, SeparableConv2d, count_parameters
from .tensor import Tensor

__all__ = [
    "XceptionSpec",
    "DenseSpec",
    "EffSpec",
    "Model",
    "build_xception_like",
    "build_densenet_like",
    "build_efficientnet_like",
    "build_model",
    "preset",
    "spec_from_dict",
    "count_parameters",
    "scale_repeats",
    "scale_width",
    "scale_resolution",
]


def _positive_ints(values, what):
    if not values or any(int(v) != v or v < 1 for v in values):
        raise SpecError(f"{what} must be a non-empty list of positive ints, got {list(values)}")


@dataclass(frozen=True)
class XceptionSpec:
    num_modules: int = 4
    stem_channels: int = 8
    channels_per_module: tuple = (8, 16, 16, 32)
    kernel_size: int = 3
    num_classes: int = 3
    in_channels: int = 1
    resolution: int = 16
    # 0-based module indices whose first separable conv uses stride 2
    downsample_modules: tuple = ()

    family = "xception"

    def __post_init__(self):
        object.__setattr__(self, "channels_per_module", tuple(self.channels_per_module))
        object.__setattr__(self, "downsample_modules", tuple(self.downsample_modules))
        if self.num_modules < 2:
            raise SpecError(f"xception: num_modules must be >= 2, got {self.num_modules}")
        if len(self.channels_per_module) != self.num_modules:
            raise SpecError(
                f"xception: channels_per_module has {len(self.channels_per_module)} entries "
                f"for {self.num_modules} modules"
            )
        _positive_ints(self.channels_per_module, "xception: channels_per_module")
        _positive_ints([self.stem_channels, self.num_classes, self.in_channels, self.resolution], "xception: sizes")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SpecError(f"xception: kernel_size must be odd, got {self.kernel_size}")
        if any(not 0 <= i < self.num_modules for i in self.downsample_modules):
            raise SpecError(f"xception: downsample_modules {self.downsample_modules} out of range")


@dataclass(frozen=True)
class DenseSpec:
    growth_rate: int = 4
    block_layout: tuple = (2, 2)
    initial_channels: int = 8
    compression: float = 0.5
    num_classes: int = 3
    in_channels: int = 1
    resolution: int = 16

    family = "densenet"

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(self.block_layout))
        _positive_ints(self.block_layout, "densenet: block_layout")
        _positive_ints(
            [self.growth_rate, self.initial_channels, self.num_classes, self.in_channels, self.resolution],
            "densenet: sizes",
        )
        if not 0.0 < self.compression <= 1.0:
            raise SpecError(f"densenet: compression must lie in (0, 1], got {self.compression}")


@dataclass(frozen=True)
class EffSpec:
    phi: float = 0.0
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15
    base_repeats: tuple = (1, 2, 2)
    base_widths: tuple = (8, 16, 24)
    base_resolution: int = 16
    num_classes: int = 3
    in_channels: int = 1
    kernel_size: int = 3
    base_strides: Optional[tuple] = None

    family = "efficientnet"

    def __post_init__(self):
        object.__setattr__(self, "base_repeats", tuple(self.base_repeats))
        object.__setattr__(self, "base_widths", tuple(self.base_widths))
        if self.base_strides is not None:
            object.__setattr__(self, "base_strides", tuple(self.base_strides))
        if self.phi < 0:
            raise SpecError(f"efficientnet: phi must be non-negative, got {self.phi}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 1:
                raise SpecError(f"efficientnet: {name} must be >= 1, got {getattr(self, name)}")
        _positive_ints(self.base_repeats, "efficientnet: base_repeats")
        _positive_ints(self.base_widths, "efficientnet: base_widths")
        if len(self.base_widths) != len(self.base_repeats):
            raise SpecError("efficientnet: base_repeats and base_widths differ in length")
        if self.base_strides is not None and (
            len(self.base_strides) != len(self.base_repeats) or any(s not in (1, 2) for s in self.base_strides)
        ):
            raise SpecError(f"efficientnet: base_strides must be 1 or 2 per stage, got {self.base_strides}")
        _positive_ints([self.base_resolution, self.num_classes, self.in_channels], "efficientnet: sizes")

    @property
    def repeats(self) -> tuple:
        return tuple(scale_repeats(r, self.alpha, self.phi) for r in self.base_repeats)

    @property
    def widths(self) -> tuple:
        return tuple(scale_width(w, self.beta, self.phi) for w in self.base_widths)

    @property
    def resolution(self) -> int:
        return scale_resolution(self.base_resolution, self.gamma, self.phi)

    @property
    def strides(self) -> tuple:
        return self.base_strides or (1,) * len(self.base_repeats)


# 1e-9 slack keeps exact products like 2 * 1.2**0 from rounding up
def scale_repeats(base: int, alpha: float, phi: float) -> int:
    return int(math.ceil(base * alpha**phi - 1e-9))


def scale_width(base: int, beta: float, phi: float) -> int:
    return max(4, 4 * int(math.floor(base * beta**phi / 4 + 0.5)))


def scale_resolution(base: int, gamma: float, phi: float) -> int:
    return int(math.floor(base * gamma**phi + 0.5))


SPEC_TYPES = {cls.family: cls for cls in (XceptionSpec, DenseSpec, EffSpec)}


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def spec_from_dict(family: str, data: dict):
    try:
        cls = SPEC_TYPES[family]
    except KeyError:
        raise SpecError(f"unknown architecture family {family!r}") from None
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SpecError(f"{family}: unknown spec fields {sorted(unknown)}")
    return cls(**data)


class Model(Module):
    """Image batch [N, C, H, W] -> class logits [N, num_classes]."""

    def __init__(self, spec, resolution: int):
        self.family = spec.family
        self.spec = spec
        self.resolution = resolution
        self.in_channels = spec.in_channels
        self.num_classes = spec.num_classes

    def __call__(self, batch):
        return self.forward(batch)

    def forward(self, batch) -> Tensor:
        batch = T.as_tensor(batch)
        expected = (self.in_channels, self.resolution, self.resolution)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ShapeError(
                f"{self.family}: expected input [N, {expected[0]}, {expected[1]}, {expected[2]}], "
                f"got {list(batch.shape)}"
            )
        return self._forward(batch)

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def predict_proba(self, batch) -> np.ndarray:
        return T.softmax(self.forward(batch)).data

    def metadata(self) -> dict:
        return {
            "family": self.family,
            "spec": spec_to_dict(self.spec),
            "num_classes": self.num_classes,
            "resolution": self.resolution,
            "in_channels": self.in_channels,
        }


# ---------------------------------------------------------------- Xception


class XceptionModule(Module):
    def __init__(self, cin, cout, kernel_size, stride, residual, rng):
        self.sep1 = SeparableConv2d(cin, cout, kernel_size, rng, stride=stride)
        self.norm1 = ChannelNorm(cout)
        self.sep2 = SeparableConv2d(cout, cout, kernel_size, rng)
        self.norm2 = ChannelNorm(cout)
        self.residual = residual
        self.project = None
        if residual and (cin != cout or stride != 1):
            self.project = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, bias=True)

    def forward(self, x):
        h = self.norm1(self.sep1(T.relu(x)))
        h = self.norm2(self.sep2(T.relu(h)))
        if not self.residual:
            return h
        shortcut = self.project(x) if self.project is not None else x
        return T.residual_add(h, shortcut)


class XceptionLike(Model):
    def __init__(self, spec: XceptionSpec, rng):
        super().__init__(spec, spec.resolution)
        self.stem = Conv2d(spec.in_channels, spec.stem_channels, spec.kernel_size, rng)
        self.stem_norm = ChannelNorm(spec.stem_channels)
        blocks, cin, size = [], spec.stem_channels, spec.resolution
        last = spec.num_modules - 1
        for i, cout in enumerate(spec.channels_per_module):
            stride = 2 if i in spec.downsample_modules else 1
            if stride == 2:
                size = (size - 1) // 2 + 1
            blocks.append(XceptionModule(cin, cout, spec.kernel_size, stride, 0 < i < last, rng))
            cin = cout
        self.blocks = blocks
        self.head = Linear(cin, spec.num_classes, rng)

    @property
    def residual_modules(self) -> list:
        """1-based indices of modules that end in a shortcut summation."""
        return [i + 1 for i, b in enumerate(self.blocks) if b.residual]

    def _forward(self, x):
        h = T.relu(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return self.head(T.global_avg_pool(T.relu(h)))


def build_xception_like(spec: XceptionSpec, seed: int = 0) -> XceptionLike:
    return XceptionLike(spec, np.random.default_rng(seed))


# ---------------------------------------------------------------- DenseNet


class DenseLayer(Module):
    def __init__(self, cin, growth_rate, rng):
        self.norm = ChannelNorm(cin)
        self.conv = Conv2d(cin, growth_rate, 3, rng)

    def forward(self, x):
        return self.conv(T.relu(self.norm(x)))


class DenseBlock(Module):
    def __init__(self, cin, growth_rate, num_layers, rng):
        self.layers = [DenseLayer(cin + j * growth_rate, growth_rate, rng) for j in range(num_layers)]
        self.out_channels = cin + num_layers * growth_rate

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(T.concat_channels(features)))
        return T.concat_channels(features)


class Transition(Module):
    def __init__(self, cin, compression, rng):
        self.out_channels = max(1, int(math.floor(compression * cin)))
        self.norm = ChannelNorm(cin)
        self.conv = Conv2d(cin, self.out_channels, 1, rng, padding=0)

    def forward(self, x):
        return T.avg_pool2d(self.conv(T.relu(self.norm(x))), 2)


class DenseNetLike(Model):
    def __init__(self, spec: DenseSpec, rng):
        super().__init__(spec, spec.resolution)
        self.stem = Conv2d(spec.in_channels, spec.initial_channels, 3, rng)
        stages, c, size = [], spec.initial_channels, spec.resolution
        last = len(spec.block_layout) - 1
        for i, num_layers in enumerate(spec.block_layout):
            block = DenseBlock(c, spec.growth_rate, num_layers, rng)
            stages.append(block)
            c = block.out_channels
            if i < last:
                if size % 2:
                    raise SpecError(
                        f"densenet: transition after block {i + 1} receives odd spatial size {size}"
                    )
                trans = Transition(c, spec.compression, rng)
                stages.append(trans)
                c, size = trans.out_channels, size // 2
        self.stages = stages
        self.final_norm = ChannelNorm(c)
        self.head = Linear(c, spec.num_classes, rng)

    def _forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.head(T.global_avg_pool(T.relu(self.final_norm(h))))


def build_densenet_like(spec: DenseSpec, seed: int = 0) -> DenseNetLike:
    return DenseNetLike(spec, np.random.default_rng(seed))


# ------------------------------------------------------------ EfficientNet


class EffBlock(Module):
    def __init__(self, cin, cout, kernel_size, stride, rng):
        self.conv = SeparableConv2d(cin, cout, kernel_size, rng, stride=stride)
        self.norm = ChannelNorm(cout)
        self.residual = cin == cout and stride == 1

    def forward(self, x):
        h = T.swish(self.norm(self.conv(x)))
        return T.residual_add(h, x) if self.residual else h


class EfficientNetLike(Model):
    def __init__(self, spec: EffSpec, rng):
        resolution = spec.resolution
        if resolution < spec.kernel_size:
            raise SpecError(
                f"efficientnet: scaled resolution {resolution} is smaller than kernel size {spec.kernel_size}"
            )
        super().__init__(spec, resolution)
        widths = spec.widths
        self.stem = Conv2d(spec.in_channels, widths[0], spec.kernel_size, rng)
        self.stem_norm = ChannelNorm(widths[0])
        blocks, c = [], widths[0]
        for repeats, width, stride in zip(spec.repeats, widths, spec.strides):
            for r in range(repeats):
                blocks.append(EffBlock(c, width, spec.kernel_size, stride if r == 0 else 1, rng))
                c = width
        self.blocks = blocks
        self.head = Linear(c, spec.num_classes, rng)

    def _forward(self, x):
        h = T.swish(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return self.head(T.global_avg_pool(h))


def build_efficientnet_like(spec: EffSpec, seed: int = 0) -> EfficientNetLike:
    return EfficientNetLike(spec, np.random.default_rng(seed))


BUILDERS = {
    "xception": build_xception_like,
    "densenet": build_densenet_like,
    "efficientnet": build_efficientnet_like,
}


def build_model(spec, seed: int = 0) -> Model:
    return BUILDERS[spec.family](spec, seed)


_PRESETS = {
    ("xception", "toy"): XceptionSpec(downsample_modules=(3,)),
    ("xception", "paper"): XceptionSpec(
        num_modules=14,
        stem_channels=32,
        channels_per_module=(64, 128, 256) + (728,) * 9 + (1024, 2048),
        resolution=299,
        downsample_modules=(1, 2, 3, 12),
    ),
    ("densenet", "toy"): DenseSpec(growth_rate=8),
    ("densenet", "paper"): DenseSpec(
        growth_rate=32, block_layout=(6, 12, 24, 16), initial_channels=64, compression=0.5, resolution=224
    ),
    ("efficientnet", "toy"): EffSpec(base_strides=(1, 1, 2), kernel_size=5),
    # phi = 3.2 puts depth near 1.8x base, the B4 depth multiplier
    ("efficientnet", "paper"): EffSpec(
        phi=3.2,
        base_repeats=(1, 2, 2, 3, 3, 4, 1),
        base_widths=(16, 24, 40, 80, 112, 192, 320),
        base_resolution=224,
        base_strides=(1, 2, 2, 2, 1, 2, 1),
    ),
}


def preset(family: str, scale: str = "toy", **overrides):
    try:
        base = _PRESETS[(family, scale)]
    except KeyError:
        raise SpecError(f"no preset {scale!r} for family {family!r}") from None
    if not overrides:
        return base
    data = asdict(base)
    data.update(overrides)
    return spec_from_dict(family, data)
