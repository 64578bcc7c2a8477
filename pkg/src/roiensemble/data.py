"""ROI patch datasets: PGM ingestion, annotation-driven cropping, synthesis, splits.

Class indices are 0 = normal, 1 = benign, 2 = malignant.

The synthetic generator draws every random number from ``SplitMix64`` and
uses only integer arithmetic, float addition and multiplication on the way to
pixel values, so a seed reproduces the same bytes on any platform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidAnnotationError, InvalidArgumentError, InvalidSplitError, UnsupportedFormatError

CLASS_NAMES = ("normal", "benign", "malignant")

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit splitmix generator (Steele, Lea & Flood constants)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randbelow(self, n: int) -> int:
        return self.next_u64() % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass
class RoiSample:
    patch: np.ndarray  # [1, H, W], values in [0, 1]
    label: int
    source_id: str


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    class_names: tuple = CLASS_NAMES


def stack_patches(samples: Sequence[RoiSample]) -> np.ndarray:
    return np.stack([s.patch for s in samples]).astype(np.float64)


def labels_of(samples: Sequence[RoiSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# --------------------------------------------------------------------- PGM


def _pgm_tokens(buf: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens and the offset after them."""
    tokens, pos, n = [], 2, len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise UnsupportedFormatError("truncated PGM header", offset=pos)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise UnsupportedFormatError(f"non-numeric PGM header field {tok!r}", offset=start)
        tokens.append(int(tok))
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise UnsupportedFormatError("missing whitespace after PGM header", offset=pos)
    return tokens, pos + 1


def parse_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise UnsupportedFormatError(f"expected binary PGM magic b'P5', found {buf[:2]!r}", offset=0)
    (width, height, maxval), start = _pgm_tokens(buf, 3)
    if width < 1 or height < 1:
        raise UnsupportedFormatError(f"invalid PGM size {width}x{height}", offset=2)
    if not 1 <= maxval <= 255:
        raise UnsupportedFormatError(f"only 8-bit PGM is supported, maxval={maxval}", offset=2)
    need = width * height
    raster = buf[start : start + need]
    if len(raster) < need:
        raise UnsupportedFormatError(
            f"truncated PGM raster: need {need} bytes, have {len(raster)}", offset=start + len(raster)
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / float(maxval)


def load_image(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a [height, width] float array in [0, 1]."""
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image: np.ndarray) -> bytes:
    pixels = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


# --------------------------------------------------------------------- ROI


def resize_bilinear(img: np.ndarray, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    out_w = out_h if out_w is None else out_w
    in_h, in_w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(CLASS_NAMES):
            raise InvalidAnnotationError(f"label index {label} out of range")
        return int(label)
    name = str(label).strip().lower()
    if name.isdigit():
        return label_index(int(name))
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise InvalidAnnotationError(f"unknown label {label!r}; expected one of {CLASS_NAMES}") from None


def extract_roi(image: np.ndarray, annotation, out_resolution: int, source_id: str = "") -> RoiSample:
    """Crop the square of side 2*radius centred on (cx, cy) and resize it.

    Parts of the square outside the image are filled with zeros.
    """
    cx, cy, radius, label = annotation
    h, w = image.shape
    cx, cy, radius = int(round(cx)), int(round(cy)), int(round(radius))
    if radius <= 0:
        raise InvalidAnnotationError(f"radius must be positive, got {radius}")
    if not (0 <= cx < w and 0 <= cy < h):
        raise InvalidAnnotationError(f"centre ({cx}, {cy}) outside image of size {w}x{h}")
    side = 2 * radius
    x0, y0 = cx - radius, cy - radius
    crop = np.zeros((side, side), dtype=np.float64)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side, w), min(y0 + side, h)
    crop[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image[sy0:sy1, sx0:sx1]
    patch = crop if side == out_resolution else resize_bilinear(crop, out_resolution)
    return RoiSample(np.clip(patch, 0.0, 1.0)[None], label_index(label), source_id)


def read_annotations(path) -> list:
    """Rows of ``image,cx,cy,radius,label`` as (image, cx, cy, radius, label_index)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = ["image", "cx", "cy", "radius", "label"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != required:
            raise InvalidAnnotationError(f"{path}: header must be {','.join(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    (
                        row["image"].strip(),
                        float(row["cx"]),
                        float(row["cy"]),
                        float(row["radius"]),
                        label_index(row["label"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise InvalidAnnotationError(f"{path}:{lineno}: {exc}") from None
    return rows


def load_annotated_dataset(directory, annotations, resolution: int) -> list:
    directory = Path(directory)
    samples = []
    cache = {}
    for i, (name, cx, cy, radius, label) in enumerate(read_annotations(annotations)):
        if name not in cache:
            cache[name] = load_image(directory / name)
        samples.append(extract_roi(cache[name], (cx, cy, radius, label), resolution, f"{name}#{i}"))
    return samples


# --------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthParams:
    """Appearance of the synthetic classes; intensities are on the [0, 1] scale."""

    background: float = 0.30
    gradient: float = 0.10
    noise: float = 0.06
    disk_contrast: float = 0.45
    blob_contrast: float = 0.45
    radius_range: tuple = (0.16, 0.26)  # as a fraction of the patch side
    spikes: tuple = (6, 9)
    spike_width: float = 0.7  # half width of a spiculation, in pixels
    spike_reach: float = 2.0  # minimum ray length, in core radii
    centre_spread: float = 0.4  # how far the lesion centre may stray from the patch centre, 0..1


def _background(rng: SplitMix64, res: int, p: SynthParams) -> np.ndarray:
    level = p.background + 0.1 * (rng.uniform() - 0.5)
    gx = p.gradient * (rng.uniform() - 0.5)
    gy = p.gradient * (rng.uniform() - 0.5)
    img = np.empty((res, res), dtype=np.float64)
    scale = 1.0 / res
    for y in range(res):
        for x in range(res):
            # triangular noise from two uniforms: no transcendental functions
            noise = (rng.uniform() + rng.uniform() - 1.0) * p.noise
            img[y, x] = level + gx * (x * scale - 0.5) + gy * (y * scale - 0.5) + noise
    return img


def _disk_mask(res, cx, cy, r) -> np.ndarray:
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    return dx * dx + dy * dy <= r * r


def _segment_mask(res, x0, y0, x1, y1, half_width) -> np.ndarray:
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    px, py = xs + 0.5, ys + 0.5
    vx, vy = x1 - x0, y1 - y0
    t = ((px - x0) * vx + (py - y0) * vy) / (vx * vx + vy * vy)
    t = np.clip(t, 0.0, 1.0)
    ex, ey = px - (x0 + t * vx), py - (y0 + t * vy)
    return ex * ex + ey * ey <= half_width * half_width


def _mass_centre(rng, res, r, spread):
    # an ROI crop is roughly centred on its lesion; spread 1 allows any position that keeps the core inside
    half = (res / 2 - (r + 1.0)) * spread
    mid = res / 2
    return rng.uniform_range(mid - half, mid + half), rng.uniform_range(mid - half, mid + half)


def _synth_one(rng: SplitMix64, label: int, res: int, p: SynthParams):
    img = _background(rng, res, p)
    mask = np.zeros((res, res), dtype=bool)
    if label == 1:
        r = rng.uniform_range(*p.radius_range) * res
        cx, cy = _mass_centre(rng, res, r, p.centre_spread)
        mask = _disk_mask(res, cx, cy, r)
        img = img + p.disk_contrast * mask
    elif label == 2:
        r = rng.uniform_range(*p.radius_range) * res * 0.7
        cx, cy = _mass_centre(rng, res, r, p.centre_spread)
        mask = _disk_mask(res, cx, cy, r)
        # irregular margin: satellite lobes around the core
        for _ in range(3):
            ox = (rng.uniform() - 0.5) * r * 1.6
            oy = (rng.uniform() - 0.5) * r * 1.6
            mask |= _disk_mask(res, cx + ox, cy + oy, r * rng.uniform_range(0.4, 0.7))
        # spiculations: thin rays to random endpoints
        lo, hi = p.spikes
        min_len = p.spike_reach * r
        for _ in range(lo + rng.randbelow(hi - lo + 1)):
            # rejection sampling keeps every ray longer than the core without sqrt or trig
            while True:
                ex = (rng.uniform() - 0.5) * res
                ey = (rng.uniform() - 0.5) * res
                if ex * ex + ey * ey >= min_len * min_len:
                    break
            mask |= _segment_mask(res, cx, cy, cx + ex, cy + ey, p.spike_width)
        img = img + p.blob_contrast * mask
    return np.clip(img, 0.0, 1.0), mask


def synthesize_dataset(seed: int, per_class: int, resolution: int = 16, params: SynthParams = SynthParams()) -> list:
    """``per_class`` samples for each of the three classes, interleaved by class."""
    if per_class < 1:
        raise InvalidArgumentError(f"per_class must be >= 1, got {per_class}")
    rng = SplitMix64(seed)
    samples = []
    for i in range(per_class):
        for label in range(len(CLASS_NAMES)):
            img, _ = _synth_one(rng, label, resolution, params)
            samples.append(RoiSample(img[None], label, f"synth-{seed}-{label}-{i}"))
    return samples


def synthesize_with_masks(seed: int, per_class: int, resolution: int = 16, params: SynthParams = SynthParams()):
    """Same draws as ``synthesize_dataset`` plus the lesion mask of every sample."""
    rng = SplitMix64(seed)
    out = []
    for i in range(per_class):
        for label in range(len(CLASS_NAMES)):
            img, mask = _synth_one(rng, label, resolution, params)
            out.append((RoiSample(img[None], label, f"synth-{seed}-{label}-{i}"), mask))
    return out


# ------------------------------------------------------------------- split


def train_test_split(samples: Sequence[RoiSample], test_fraction: float, seed: int) -> DatasetSplit:
    """Stratified split; each class sends round(test_fraction * size) samples to test."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidSplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = SplitMix64(seed)
    by_class: dict = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(idx)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        members = rng.shuffle(list(by_class[label]))
        n_test = int(test_fraction * len(members) + 0.5)
        if n_test == 0 or n_test == len(members):
            raise InvalidSplitError(
                f"class {label} with {len(members)} samples gets {n_test} test samples at fraction {test_fraction}"
            )
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    # restore dataset order inside each side
    train = [samples[i] for i in sorted(train_idx)]
    test = [samples[i] for i in sorted(test_idx)]
    return DatasetSplit(train, test, seed)


# ------------------------------------------------------------ cache file

DATASET_MAGIC = b"ENSD"
DATASET_VERSION = 1


def save_dataset(path, split: DatasetSplit) -> None:
    """Write a split using the checkpoint container layout with magic ``ENSD``."""
    from .training import write_container

    meta = {"seed": split.seed, "class_names": list(split.class_names)}
    arrays = []
    for side in ("train", "test"):
        for i, s in enumerate(getattr(split, side)):
            arrays.append((f"{side}/{i}/{s.label}/{s.source_id}", s.patch))
    write_container(path, DATASET_MAGIC, DATASET_VERSION, meta, arrays, [])


def load_dataset(path) -> DatasetSplit:
    from .training import read_container

    meta, arrays, _ = read_container(path, DATASET_MAGIC)
    train, test = [], []
    for name, arr in arrays:
        side, _, label, source_id = name.split("/", 3)
        (train if side == "train" else test).append(RoiSample(arr, int(label), source_id))
    return DatasetSplit(train, test, meta["seed"], tuple(meta["class_names"]))
