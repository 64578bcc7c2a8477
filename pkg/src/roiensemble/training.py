"""Plain-SGD training, evaluation and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .architectures import Model, build_model, spec_from_dict, spec_to_dict
from .data import DatasetSplit, labels_of, stack_patches
from .errors import (
    CorruptCheckpointError,
    DivergedError,
    IncompatibleCheckpointError,
    InvalidArgumentError,
    InvalidStateError,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    shuffle: bool = True
    checkpoint_path: Optional[str] = None
    # replace running norm statistics by exact training-set statistics at the end
    recalibrate_norm: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvalidArgumentError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    checksum: str = ""
    elapsed: float = 0.0


def sgd_step(params: Sequence[Tensor], learning_rate: float) -> None:
    """w <- w - lr * grad, in place. Gradients are left for the caller to zero."""
    for p in params:
        if p.requires_grad and p.grad is None:
            raise InvalidStateError(f"parameter of shape {p.shape} has no gradient")
    if learning_rate == 0:
        return
    for p in params:
        p.data -= learning_rate * p.grad


def parameter_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _as_samples(dataset) -> list:
    if isinstance(dataset, DatasetSplit):
        return dataset.train
    return list(dataset)


def train_model(model: Model, train_set, config: TrainConfig) -> TrainReport:
    samples = _as_samples(train_set)
    if not samples:
        raise InvalidArgumentError("training set is empty")
    x_all = stack_patches(samples)
    y_all = labels_of(samples)
    if y_all.max() >= model.num_classes:
        raise InvalidArgumentError(f"label {y_all.max()} out of range for {model.num_classes} classes")

    # data order has its own generator so it can vary independently of init
    order_rng = np.random.default_rng([config.seed, 0x5EED])
    params = model.parameters()
    report = TrainReport()
    start = time.perf_counter()
    n = len(samples)
    model.train()
    model.zero_grad()
    for epoch in range(config.epochs):
        order = order_rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss, correct = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            logits = model(x_all[idx])
            loss = T.cross_entropy(logits, y_all[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedError(epoch + 1, b + 1, value)
            loss.backward()
            sgd_step(params, config.learning_rate)
            model.zero_grad()
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_all[idx]).sum())
        report.epoch_loss.append(total_loss / n)
        report.epoch_accuracy.append(correct / n)
        log.debug("%s epoch %d loss %.4f acc %.3f", model.family, epoch + 1, total_loss / n, correct / n)
    if config.recalibrate_norm:
        recalibrate_norm_stats(model, x_all)
    model.eval()
    report.elapsed = time.perf_counter() - start
    report.checksum = parameter_checksum(model)
    if config.checkpoint_path:
        save_checkpoint(model, config.checkpoint_path)
    return report


def recalibrate_norm_stats(model: Model, x: np.ndarray) -> None:
    """Set every running mean/variance to the statistics of one full-batch pass over ``x``.

    Momentum-averaged statistics of small minibatches underestimate the
    between-sample variance, which shows up as a train/eval accuracy gap.
    """
    buffers = [state for _, state in model.named_buffers()]
    saved = [state.momentum for state in buffers]
    for state in buffers:
        state.momentum = 1.0
    try:
        model.train()
        model(T.Tensor(x))
    finally:
        for state, m in zip(buffers, saved):
            state.momentum = m
        model.eval()


def evaluate_model(model: Model, test_set, batch_size: int = 64):
    """Eval-mode softmax probabilities and argmax predictions, in dataset order."""
    samples = test_set.test if isinstance(test_set, DatasetSplit) else list(test_set)
    if not samples:
        raise InvalidArgumentError("test set is empty")
    model.eval()
    x = stack_patches(samples)
    probs = np.concatenate([model.predict_proba(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    return probs.argmax(axis=1), probs


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ENSB"
CHECKPOINT_VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def write_container(path, magic: bytes, version: int, meta: dict, arrays, stats) -> None:
    """magic | u32 version | u32 len + JSON metadata | u32 count + arrays | u32 count + stats.

    Each array is: u32 name length, UTF-8 name, u32 rank, rank x u32 extents,
    little-endian float64 payload.
    """
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<I", version), struct.pack("<I", len(text)), text]
    for group in (arrays, stats):
        parts.append(struct.pack("<I", len(group)))
        parts.extend(_pack_array(name, arr) for name, arr in group)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(
                f"{self.path}: truncated at byte {len(self.buf)} (needed {n} bytes at offset {self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, data


def read_container(path, magic: bytes):
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise CorruptCheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    r = _Reader(buf, path)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata: {exc}") from None
    arrays = [r.array() for _ in range(r.u32())]
    stats = [r.array() for _ in range(r.u32())]
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return meta, arrays, stats


def _stat_arrays(model: Model):
    out = []
    for name, state in model.named_buffers():
        out.append((f"{name}.running_mean", state.running_mean))
        out.append((f"{name}.running_var", state.running_var))
    return out


def save_checkpoint(model: Model, path) -> None:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.metadata(), arrays, _stat_arrays(model))


def load_checkpoint(path, spec=None) -> Model:
    """Rebuild the model described by ``spec`` (or by the stored metadata) and fill its state."""
    meta, arrays, stats = read_container(path, CHECKPOINT_MAGIC)
    if spec is None:
        spec = spec_from_dict(meta["family"], meta["spec"])
    if meta.get("family") != spec.family:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint holds family {meta.get('family')!r}, spec is {spec.family!r}"
        )
    if meta.get("spec") != spec_to_dict(spec):
        raise IncompatibleCheckpointError(f"{path}: stored spec {meta.get('spec')} differs from {spec_to_dict(spec)}")
    model = build_model(spec)
    named = model.named_parameters()
    if [n for n, _ in named] != [n for n, _ in arrays]:
        raise IncompatibleCheckpointError(f"{path}: parameter names do not match the model")
    for (name, p), (_, data) in zip(named, arrays):
        if p.shape != data.shape:
            raise IncompatibleCheckpointError(f"{path}: {name} has shape {data.shape}, model expects {p.shape}")
        p.data = data.copy()
    buffers = dict(model.named_buffers())
    stat_map = dict(stats)
    for name, state in buffers.items():
        try:
            state.running_mean = stat_map[f"{name}.running_mean"].copy()
            state.running_var = stat_map[f"{name}.running_var"].copy()
        except KeyError:
            raise IncompatibleCheckpointError(f"{path}: missing running statistics for {name}") from None
    model.eval()
    return model
