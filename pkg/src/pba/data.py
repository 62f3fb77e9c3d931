"""Datasets: a synthetic shape-classification task, stratified reduction,
and a raw little-endian binary format with a JSON manifest.

A split stores its images as one ``uint8`` array ``(n, height, width,
channels)`` plus parallel ``labels`` and ``ids`` arrays.  Example ids are
unique across the three splits of a :class:`DatasetSplits`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes

NATURAL = "natural"
DIGIT = "digit"
DATASET_KINDS = (NATURAL, DIGIT)

RAW_MAGIC = 0x50424144  # b"DABP" on disk
_HEADER = struct.Struct("<5I")


@dataclass(frozen=True)
class Split:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError("split images must be a uint8 (n, h, w, c) array")
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise ValueError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        return Split(self.images[index], self.labels[index], self.ids[index])


@dataclass(frozen=True)
class DatasetSplits:
    train: Split
    val: Split
    test: Split
    class_count: int
    dataset_kind: str = NATURAL
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise ValueError(f"dataset_kind must be one of {DATASET_KINDS}")
        for name in ("train", "val", "test"):
            labels = getattr(self, name).labels
            if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ValueError(f"{name} labels outside [0, {self.class_count})")
        seen = set()
        for name in ("train", "val", "test"):
            ids = set(getattr(self, name).ids.tolist())
            if ids & seen:
                raise ValueError(f"{name} split shares example ids with another split")
            seen |= ids

    @property
    def image_shape(self) -> tuple[int, int, int]:
        for split in (self.train, self.val, self.test):
            if len(split):
                return tuple(split.images.shape[1:])
        raise ValueError("dataset has no examples")


def channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std in [0, 1] pixel units."""
    f = images.astype(np.float64) / 255.0
    mean = f.mean(axis=(0, 1, 2))
    std = f.std(axis=(0, 1, 2))
    return tuple(float(m) for m in mean), tuple(float(max(s, 1e-6)) for s in std)


# --- synthetic shapes ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic task.

    Train images are drawn clean; validation and test images go through the
    nuisance transforms (uniform rotation in degrees, integer translation in
    pixels, multiplicative brightness jitter), so augmentations resembling the
    nuisances pay off on held-out data.
    """

    seed: int
    image_size: int = 16
    channels: int = 1
    class_count: int = 6
    train_size: int = 600
    val_size: int = 300
    test_size: int = 600
    rotation_range: float = 30.0
    translation_range: int = 2
    brightness_jitter: float = 0.2
    pixel_noise: float = 12.0
    dataset_kind: str = NATURAL

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.rotation_range < 0 or self.translation_range < 0 or self.brightness_jitter < 0:
            raise ValueError("nuisance ranges must be non-negative")


def _bar(x, y, t, angle):
    """Distance-based bar through the origin at ``angle`` radians."""
    ca, sa = np.cos(angle), np.sin(angle)
    along = x * ca + y * sa
    across = -x * sa + y * ca
    return (np.abs(across) <= t) & (np.abs(along) <= 0.75)


def _tpl_hbar(x, y, t):
    return _bar(x, y, t, 0.0)


def _tpl_vbar(x, y, t):
    return _bar(x, y, t, np.pi / 2)


def _tpl_plus(x, y, t):
    return _bar(x, y, t, 0.0) | _bar(x, y, t, np.pi / 2)


def _tpl_ring(x, y, t):
    r = np.hypot(x, y)
    return np.abs(r - 0.55) <= t


def _tpl_disk(x, y, t):
    return np.hypot(x, y) <= 0.35 + t


def _tpl_corner(x, y, t):
    vertical = (np.abs(x + 0.5) <= t) & (np.abs(y) <= 0.7)
    horizontal = (np.abs(y - 0.7) <= t) & (x >= -0.5 - t) & (x <= 0.6)
    return vertical | horizontal


def _tpl_tee(x, y, t):
    top = (np.abs(y + 0.6) <= t) & (np.abs(x) <= 0.7)
    stem = (np.abs(x) <= t) & (y >= -0.6) & (y <= 0.7)
    return top | stem


def _tpl_triangle(x, y, t):
    inside = (y <= 0.55) & (y >= 2.0 * np.abs(x) - 0.65)
    shrunk = (y <= 0.55 - 2 * t) & (y >= 2.0 * np.abs(x) - 0.65 + 3 * t)
    return inside & ~shrunk


TEMPLATES = {
    "hbar": _tpl_hbar,
    "vbar": _tpl_vbar,
    "plus": _tpl_plus,
    "ring": _tpl_ring,
    "disk": _tpl_disk,
    "corner": _tpl_corner,
    "tee": _tpl_tee,
    "triangle": _tpl_triangle,
}
TEMPLATE_NAMES = tuple(TEMPLATES)


def render_shape(
    label: int,
    size: int,
    rng: np.random.Generator,
    channels: int = 1,
    angle: float = 0.0,
    shift: tuple[int, int] = (0, 0),
    gain: float = 1.0,
    noise: float = 0.0,
) -> np.ndarray:
    """Draw class ``label`` analytically on a ``size`` x ``size`` canvas.

    Per-example variation (stroke width, scale, intensity, pixel noise) is
    always drawn from ``rng``; ``angle`` (degrees), ``shift`` (dx, dy pixels)
    and ``gain`` are the nuisance transform.
    """
    fn = TEMPLATES[TEMPLATE_NAMES[label]]
    thickness = rng.uniform(0.09, 0.15)
    scale = rng.uniform(0.9, 1.1)
    intensity = rng.uniform(170, 240)
    background = rng.uniform(10, 40)
    tint = rng.uniform(0.7, 1.0, size=channels) if channels == 3 else np.ones(1)

    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    xs = (xs - c - shift[0]) / (size / 2.0) / scale
    ys = (ys - c - shift[1]) / (size / 2.0) / scale
    th = np.deg2rad(angle)
    xr = xs * np.cos(th) + ys * np.sin(th)
    yr = -xs * np.sin(th) + ys * np.cos(th)
    mask = fn(xr, yr, thickness)

    plane = np.where(mask, intensity, background)
    img = plane[:, :, None] * tint[None, None, :] * gain
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _render_split(spec: SyntheticSpec, n: int, rng: np.random.Generator, nuisance: bool, first_id: int) -> Split:
    labels = np.arange(n) % spec.class_count
    rng.shuffle(labels)
    images = np.empty((n, spec.image_size, spec.image_size, spec.channels), dtype=np.uint8)
    for i, label in enumerate(labels):
        angle, shift, gain = 0.0, (0, 0), 1.0
        if nuisance:
            angle = rng.uniform(-spec.rotation_range, spec.rotation_range)
            t = spec.translation_range
            shift = (int(rng.integers(-t, t + 1)), int(rng.integers(-t, t + 1)))
            gain = rng.uniform(1.0 - spec.brightness_jitter, 1.0 + spec.brightness_jitter)
        images[i] = render_shape(
            int(label), spec.image_size, rng, spec.channels, angle, shift, gain, spec.pixel_noise
        )
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    return Split(images, labels.astype(np.int64), ids)


def generate_synthetic(spec: SyntheticSpec) -> DatasetSplits:
    if spec.class_count > len(TEMPLATES):
        raise ValueError(
            f"class_count {spec.class_count} exceeds the {len(TEMPLATES)} available templates"
        )
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)]
    train = _render_split(spec, spec.train_size, streams[0], False, 0)
    val = _render_split(spec, spec.val_size, streams[1], True, spec.train_size)
    test = _render_split(spec, spec.test_size, streams[2], True, spec.train_size + spec.val_size)
    mean, std = channel_stats(train.images) if len(train) else ((0.0,), (1.0,))
    return DatasetSplits(train, val, test, spec.class_count, spec.dataset_kind, mean, std)


def reduce_split(splits: DatasetSplits, n: int, seed: int) -> DatasetSplits:
    """Subsample the training split to ``n`` examples, stratified by class.

    Per-class quotas use largest-remainder rounding so every class keeps
    its share to within one example.
    """
    train = splits.train
    if n > len(train):
        raise ValueError(f"cannot reduce {len(train)} training examples to {n}")
    if n < splits.class_count:
        raise ValueError(f"n={n} is smaller than class_count={splits.class_count}")
    if n == len(train):
        return splits
    classes, counts = np.unique(train.labels, return_counts=True)
    exact = counts * n / len(train)
    quota = np.floor(exact).astype(int)
    leftover = n - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:leftover]] += 1

    rng = np.random.default_rng(seed)
    keep = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(train.labels == cls)
        keep.append(rng.choice(members, size=q, replace=False))
    index = np.sort(np.concatenate(keep))
    return replace(splits, train=train.subset(index))


# --- raw binary format -----------------------------------------------------


class RawFormatError(ValueError):
    """A raw dataset file does not match its header."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class BadMagicError(RawFormatError):
    pass


class BadHeaderError(RawFormatError):
    pass


class TruncatedFileError(RawFormatError):
    pass


class TrailingDataError(RawFormatError):
    pass


class LabelRangeError(RawFormatError):
    pass


def encode_raw_split(split: Split) -> bytes:
    n = len(split)
    h, w, c = split.images.shape[1:]
    if n and (split.labels.min() < 0 or split.labels.max() > 255):
        raise ValueError("labels must fit in one byte")
    records = np.empty((n, 1 + h * w * c), dtype=np.uint8)
    records[:, 0] = split.labels
    records[:, 1:] = split.images.reshape(n, h * w * c)
    return _HEADER.pack(RAW_MAGIC, n, h, w, c) + records.tobytes()


def decode_raw_split(buf: bytes, class_count: int | None = None, path="<bytes>", first_id: int = 0) -> Split:
    """Parse one raw split.  Every header or payload defect raises a distinct
    :class:`RawFormatError` subclass carrying the byte offset."""
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(path, len(buf), f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    magic, n, h, w, c = _HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise BadMagicError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{RAW_MAGIC:08x}")
    if h == 0 or w == 0 or h > 65535 or w > 65535:
        raise BadHeaderError(path, 8, f"implausible image size {h}x{w}")
    if c not in (1, 3):
        raise BadHeaderError(path, 16, f"channels must be 1 or 3, got {c}")
    record = 1 + h * w * c
    expected = _HEADER.size + n * record
    if len(buf) < expected:
        raise TruncatedFileError(
            path, len(buf), f"expected {expected} bytes for {n} records, got {len(buf)}"
        )
    if len(buf) > expected:
        raise TrailingDataError(path, expected, f"{len(buf) - expected} unexpected bytes after {n} records")
    records = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(n, record)
    labels = records[:, 0].astype(np.int64)
    if class_count is not None and n:
        bad = np.flatnonzero(labels >= class_count)
        if len(bad):
            i = int(bad[0])
            raise LabelRangeError(
                path, _HEADER.size + i * record,
                f"record {i} label {labels[i]} outside [0, {class_count})",
            )
    images = records[:, 1:].reshape(n, h, w, c).copy()
    return Split(images, labels, np.arange(first_id, first_id + n, dtype=np.int64))


def write_raw(splits: DatasetSplits, directory, stem: str = "data") -> Path:
    """Write the three splits plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": {
        "class_count": splits.class_count,
        "dataset_kind": splits.dataset_kind,
        "mean": list(splits.mean),
        "std": list(splits.std),
    }}
    for name in ("train", "val", "test"):
        fname = f"{stem}_{name}.bin"
        atomic_write_bytes(directory / fname, encode_raw_split(getattr(splits, name)))
        manifest[name] = fname
    path = directory / f"{stem}.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def load_raw(manifest_path) -> DatasetSplits:
    """Load splits listed in a manifest ``{"train", "val", "test", "meta"}``.

    Split paths are resolved relative to the manifest.  ``meta`` must give
    ``class_count`` and may give ``dataset_kind``, ``mean`` and ``std``.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    meta = manifest.get("meta", {})
    if "class_count" not in meta:
        raise ValueError(f"{manifest_path}: meta.class_count is required")
    class_count = int(meta["class_count"])
    splits, first_id = {}, 0
    for name in ("train", "val", "test"):
        if name not in manifest:
            raise ValueError(f"{manifest_path}: missing '{name}' entry")
        path = manifest_path.parent / manifest[name]
        split = decode_raw_split(path.read_bytes(), class_count, path, first_id)
        splits[name] = split
        first_id += len(split)
    mean, std = meta.get("mean"), meta.get("std")
    if mean is None or std is None:
        mean, std = channel_stats(splits["train"].images) if len(splits["train"]) else ((0.0,), (1.0,))
    return DatasetSplits(
        splits["train"], splits["val"], splits["test"], class_count,
        meta.get("dataset_kind", NATURAL), tuple(mean), tuple(std),
    )

