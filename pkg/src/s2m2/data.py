"""Synthetic image data, the FSL1 container, class splits, and image transforms.

Images are stored as float32 arrays of shape (n, C, H, W) with values in
[0, 1]; transforms accept a single (C, H, W) image or any array whose last two
axes are the square spatial plane.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, ValidationError

MAGIC = b"FSL1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def __len__(self) -> int:
        return len(self.labels)

    def indices_of(self, classes) -> np.ndarray:
        """Positions of every image whose label is in ``classes``, in storage order."""
        return np.flatnonzero(np.isin(self.labels, np.asarray(list(classes), dtype=np.int64)))

    def validate(self) -> None:
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if len(self.labels) == 0:
            raise ValidationError("dataset has no images")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ValidationError(f"label outside [0, {self.class_count})")
        counts = np.bincount(self.labels, minlength=self.class_count)
        if counts.min() < 2:
            raise ValidationError(f"class {int(counts.argmin())} has {int(counts.min())} images; need at least 2")
        if not (np.all(self.images >= 0.0) and np.all(self.images <= 1.0)):
            raise ValidationError("pixel values must lie in [0, 1]")

    def equals(self, other: "ImageDataset") -> bool:
        return (self.class_count == other.class_count
                and self.images.shape == other.images.shape
                and np.array_equal(self.labels, other.labels)
                and self.images.tobytes() == other.images.tobytes())


# -- synthetic generation ----------------------------------------------------

def _class_params(rng: np.random.Generator, classes: int) -> list[dict]:
    # stratified orientations and frequencies keep classes apart
    thetas = (rng.permutation(classes) + rng.uniform(0.1, 0.9, classes)) * math.pi / classes
    freqs = 0.05 + 0.17 * (rng.permutation(classes) + rng.uniform(0.2, 0.8, classes)) / classes
    params = []
    for c in range(classes):
        params.append(dict(
            theta=thetas[c],
            freq=freqs[c],
            thickness=rng.uniform(-0.5, 0.5),
            ecc=rng.uniform(1.0, 2.2),
            psi=rng.uniform(0.0, 2 * math.pi),
            blob=rng.uniform(0.35, 0.8),
        ))
    return params


def _draw_image(p: dict, rng: np.random.Generator, size: int) -> np.ndarray:
    grid = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    theta = p["theta"] + rng.normal(0.0, math.radians(9.0))
    freq = p["freq"] * (1.0 + rng.normal(0.0, 0.08))
    shift = rng.normal(0.0, 0.07 * size, 2)
    offset = 0.16 * size
    cy = shift[0] + offset * math.sin(p["psi"])
    cx = shift[1] + offset * math.cos(p["psi"])
    u, v = xx - cx, yy - cy
    across = u * math.cos(theta) + v * math.sin(theta)
    along = -u * math.sin(theta) + v * math.cos(theta)

    bars = 1.0 / (1.0 + np.exp(-6.0 * (np.sin(2 * math.pi * freq * across + rng.uniform(0, 2 * math.pi))
                                       - p["thickness"])))
    sigma = 0.2 * size
    envelope = np.exp(-(across ** 2 / (2 * sigma ** 2) + along ** 2 / (2 * (sigma * p["ecc"]) ** 2)))
    # marker on the far side of the envelope; breaks every rotational symmetry
    by = -0.3 * size * math.sin(p["psi"]) + rng.normal(0.0, 0.5)
    bx = -0.3 * size * math.cos(p["psi"]) + rng.normal(0.0, 0.5)
    blob = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * (0.07 * size) ** 2))

    amplitude = rng.uniform(0.45, 0.9)
    img = 0.08 + amplitude * envelope * bars + p["blob"] * rng.uniform(0.6, 1.2) * blob
    img += rng.normal(0.0, 0.12, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(seed: int = 0, classes: int = 16, per_class: int = 60, size: int = 32,
                       sample_seed: int | None = None) -> ImageDataset:
    """Single-channel oriented grating/blob images, ``per_class`` of each class.

    Class appearance depends only on ``seed``; ``sample_seed`` (default: seed)
    controls the per-image jitter, so fresh samples of the same classes can be
    drawn by changing it alone.
    """
    if size < 16:
        raise ConfigurationError(f"image size must be at least 16, got {size}")
    if classes < 8:
        raise ConfigurationError(f"need at least 8 classes, got {classes}")
    if per_class < 20:
        raise ConfigurationError(f"need at least 20 images per class, got {per_class}")
    params = _class_params(np.random.default_rng([seed, 0]), classes)
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    images = np.empty((classes * per_class, 1, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for n, c in enumerate(labels):
        images[n, 0] = _draw_image(params[c], rng, size)
    return ImageDataset(images, labels, classes)


# -- FSL1 container ------------------------------------------------------------

def _record_dtype(pixels: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("pixels", "<f4", (pixels,))])


def save_dataset(dataset: ImageDataset, path) -> None:
    dataset.validate()
    n, c, h, w = dataset.images.shape
    records = np.empty(n, dtype=_record_dtype(c * h * w))
    records["label"] = dataset.labels
    records["pixels"] = dataset.images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dataset.class_count, n, c, h, w))
        fh.write(records.tobytes())


def load_dataset(path) -> ImageDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    magic, version, class_count, count, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if count == 0:
        raise FormatError("empty image list", offset=12)
    if min(c, h, w) == 0:
        raise FormatError("zero image extent", offset=16)
    dtype = _record_dtype(c * h * w)
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated file: expected {expected} bytes, got {len(blob)}", offset=len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes", offset=expected)
    records = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size, count=count)
    labels = records["label"].astype(np.int64)
    pixels = records["pixels"]

    bad_label = np.flatnonzero(labels >= class_count)
    if bad_label.size:
        raise FormatError(f"class id {labels[bad_label[0]]} >= class count {class_count}",
                          offset=_HEADER.size + int(bad_label[0]) * dtype.itemsize)
    bad = ~((pixels >= 0.0) & (pixels <= 1.0))
    if bad.any():
        rec, pix = np.argwhere(bad)[0]
        raise FormatError(f"pixel value {pixels[rec, pix]} outside [0, 1]",
                          offset=_HEADER.size + int(rec) * dtype.itemsize + 4 + 4 * int(pix))
    counts = np.bincount(labels, minlength=class_count)
    if counts.min() < 2:
        raise FormatError(f"class {int(counts.argmin())} has fewer than 2 images", offset=8)
    return ImageDataset(pixels.reshape(count, c, h, w).copy(), labels, class_count)


# -- class splits --------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    base: tuple
    val: tuple
    novel: tuple

    def __post_init__(self):
        for name in ("base", "val", "novel"):
            object.__setattr__(self, name, tuple(sorted(int(c) for c in getattr(self, name))))
        seen: dict[int, str] = {}
        for name in ("base", "val", "novel"):
            for c in getattr(self, name):
                if c in seen:
                    raise ValidationError(f"class {c} appears in both {seen[c]} and {name}")
                seen[c] = name

    @property
    def n_base(self) -> int:
        return len(self.base)

    @property
    def n_novel(self) -> int:
        return len(self.novel)

    def all_classes(self) -> tuple:
        return tuple(sorted(self.base + self.val + self.novel))

    def merged(self) -> "SplitSpec":
        """Validation classes folded into the base set."""
        return SplitSpec(self.base + self.val, (), self.novel)

    def to_text(self) -> str:
        return "".join(f"{name}: {','.join(map(str, getattr(self, key)))}\n"
                       for name, key in (("base", "base"), ("val", "val"), ("novel", "novel")))

    @classmethod
    def from_text(cls, text: str) -> "SplitSpec":
        found = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, rest = line.partition(":")
            key = key.strip()
            if not sep or key not in ("base", "val", "novel") or key in found:
                raise FormatError(f"unexpected split line {line!r}", offset=lineno)
            try:
                found[key] = [int(tok) for tok in rest.split(",") if tok.strip()]
            except ValueError:
                raise FormatError(f"non-integer class id in {line!r}", offset=lineno) from None
        missing = {"base", "val", "novel"} - set(found)
        if missing:
            raise FormatError(f"missing split lines: {sorted(missing)}")
        return cls(found["base"], found["val"], found["novel"])


def save_splits(splits: SplitSpec, path) -> None:
    Path(path).write_text(splits.to_text())


def load_splits(path) -> SplitSpec:
    return SplitSpec.from_text(Path(path).read_text())


def _apportion(ratios, total: int) -> list[int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValidationError(f"need three positive split ratios, got {list(ratios)}")
    exact = ratios / ratios.sum() * total
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def make_splits(class_count: int, ratios=(8, 3, 5), seed: int | None = 0, *,
                base=None, val=None, novel=None, merge_val: bool = False,
                min_novel: int = 1) -> SplitSpec:
    """Partition ``range(class_count)`` into base/validation/novel class sets.

    Either pass explicit ``base``/``val``/``novel`` lists or split by
    ``ratios``; with ``seed=None`` classes are assigned in id order.
    """
    if base is not None or val is not None or novel is not None:
        splits = SplitSpec(base or (), val or (), novel or ())
        if splits.all_classes() != tuple(range(class_count)):
            raise ValidationError("explicit splits must cover every class exactly once")
    else:
        counts = _apportion(ratios, class_count)
        order = np.arange(class_count) if seed is None else np.random.default_rng(seed).permutation(class_count)
        cut1, cut2 = counts[0], counts[0] + counts[1]
        splits = SplitSpec(order[:cut1], order[cut1:cut2], order[cut2:])
    if not splits.base or not splits.val or not splits.novel:
        raise ConfigurationError(f"every split must be nonempty, got sizes "
                                 f"{len(splits.base)}/{len(splits.val)}/{len(splits.novel)}")
    if len(splits.novel) < min_novel:
        raise ConfigurationError(f"novel split has {len(splits.novel)} classes; need at least {min_novel}")
    return splits.merged() if merge_val else splits


# -- rotations -------------------------------------------------------------------

def _check_square(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"rotation needs a square image, got spatial shape {x.shape[-2:]}")


def rotate90(x: np.ndarray, k: int) -> np.ndarray:
    """Rotate by k quarter turns; one turn sends pixel (i, j) to (j, H-1-i)."""
    x = np.asarray(x)
    _check_square(x)
    return np.ascontiguousarray(np.rot90(x, -(k % 4), axes=(-2, -1)))


_NN_MAPS: dict[tuple[int, int], tuple] = {}


def _nearest_map(size: int, angle: int):
    key = (size, angle)
    if key not in _NN_MAPS:
        c = (size - 1) / 2.0
        t = math.radians(angle)
        i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        u, v = i - c, j - c
        # inverse of the forward map (u, v) -> (u cos t + v sin t, -u sin t + v cos t)
        src_i = np.rint(u * math.cos(t) - v * math.sin(t) + c).astype(int)
        src_j = np.rint(u * math.sin(t) + v * math.cos(t) + c).astype(int)
        inside = (src_i >= 0) & (src_i < size) & (src_j >= 0) & (src_j < size)
        _NN_MAPS[key] = (np.clip(src_i, 0, size - 1), np.clip(src_j, 0, size - 1), inside)
    return _NN_MAPS[key]


def rotate45(x: np.ndarray, angle: int) -> np.ndarray:
    """Rotate by a multiple of 45 degrees (same sense as ``rotate90``).

    Odd multiples use nearest-neighbour sampling about the image centre and
    fill pixels that come from outside the frame with 0.
    """
    if angle % 45 != 0:
        raise ValidationError(f"rotation angle must be a multiple of 45, got {angle}")
    x = np.asarray(x)
    _check_square(x)
    angle %= 360
    if angle % 90 == 0:
        return rotate90(x, angle // 90)
    src_i, src_j, inside = _nearest_map(x.shape[-1], angle)
    return np.where(inside, x[..., src_i, src_j], 0).astype(x.dtype)


rotate = rotate45


@dataclass(frozen=True)
class RotationConfig:
    angles: tuple = (0, 90, 180, 270)

    def __post_init__(self):
        angles = tuple(sorted(int(a) for a in self.angles))
        if len(set(angles)) != len(angles):
            raise ValidationError(f"duplicate rotation angles in {self.angles}")
        if 0 not in angles:
            raise ValidationError("rotation angle set must contain 0")
        for a in angles:
            if a % 45 or not 0 <= a < 360:
                raise ValidationError(f"rotation angle {a} is not a multiple of 45 in [0, 360)")
        object.__setattr__(self, "angles", angles)

    def __len__(self) -> int:
        return len(self.angles)

    def label_of(self, angle: int) -> int:
        return self.angles.index(int(angle) % 360)

    def expand(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stack every image at every angle: angle-major order, labels 0..|angles|-1."""
        rotated = np.concatenate([rotate45(images, a) for a in self.angles], axis=0)
        labels = np.repeat(np.arange(len(self.angles)), len(images))
        return rotated, labels


# -- augmentation and perturbation ----------------------------------------------

def augment_exemplar(x: np.ndarray, rng: np.random.Generator, pad: int = 4,
                     scale=(0.8, 1.2), shift=(-0.1, 0.1)) -> np.ndarray:
    """Random crop (zero pad, crop back), h/v flips, brightness jitter, clip."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[..., top:top + h, left:left + w]
    if rng.random() < 0.5:
        out = out[..., :, ::-1]
    if rng.random() < 0.5:
        out = out[..., ::-1, :]
    out = out * rng.uniform(*scale) + rng.uniform(*shift)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


BRIGHTNESS = (0.05, 0.10, 0.15, 0.20, 0.25)
CONTRAST = (0.75, 0.65, 0.55, 0.45, 0.35)
PIXELATE = (2, 3, 4, 5, 6)
PERTURBATIONS = ("brightness", "contrast", "pixelate")


def pixelate(x: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor blocks (partial edge blocks included), then upsample."""
    x = np.asarray(x)
    if factor <= 1:
        return x.copy()
    h, w = x.shape[-2:]
    rows = np.arange(h) // factor
    cols = np.arange(w) // factor
    nr, nc = rows[-1] + 1, cols[-1] + 1
    sums = np.zeros(x.shape[:-2] + (nr, nc))
    np.add.at(sums, (..., rows[:, None], cols[None, :]), x.astype(np.float64))
    counts = np.bincount(rows)[:, None] * np.bincount(cols)[None, :]
    blocks = sums / counts
    return blocks[..., rows[:, None], cols[None, :]].astype(x.dtype)


def perturb(x: np.ndarray, kind: str, severity: int) -> np.ndarray:
    """Brightness / contrast / pixelation corruption; severity 0 is the identity."""
    if kind not in PERTURBATIONS:
        raise ValidationError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    if not 0 <= severity <= 5:
        raise ValidationError(f"severity must be in 0..5, got {severity}")
    x = np.asarray(x)
    if severity == 0:
        return x.copy()
    if kind == "brightness":
        out = x + BRIGHTNESS[severity - 1]
    elif kind == "contrast":
        mean = x.mean(axis=(-3, -2, -1) if x.ndim >= 3 else None, keepdims=True, dtype=np.float64)
        out = (x - mean) * CONTRAST[severity - 1] + mean
    else:
        out = pixelate(x, PIXELATE[severity - 1])
    return np.clip(out, 0.0, 1.0).astype(x.dtype)
