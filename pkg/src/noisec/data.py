"""Dataset ingestion: synthetic desk-scale generator, NSDS files and the
packed CIFAR-10 binary importer.

NSDS layout (little endian)::

    b"NSDS" | version u32 | count u32 | C u32 | H u32 | W u32 | classes u32
    { f32 * C*H*W image | u16 label } * count
    [ b"CFGH" | 64 ascii hex chars ]      optional config-hash trailer
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import FormatError, Reader
from .models import LabeledDataset

NSDS_MAGIC = b"NSDS"
NSDS_VERSION = 1
TRAILER_MAGIC = b"CFGH"

SHAPES = ("square", "disk", "hstripes", "cross", "triangle", "ring", "diagonal", "checker", "vstripes", "frame")


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    num_samples: int = 2500
    image_size: int = 16
    channels: int = 3
    test_fraction: float = 0.2
    seed: int = 0
    edge_width: float = 2.5

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.edge_width <= 0:
            raise ValueError("edge_width must be > 0")


def _shape_field(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Signed inside-distance (pixels) of a randomly placed shape."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(size * 0.35, size * 0.65, 2)
    dy, dx = yy - cy, xx - cx
    box = np.maximum(np.abs(dy), np.abs(dx))
    if kind == "square":
        return r * 0.85 - box
    if kind == "disk":
        return r - np.hypot(dy, dx)
    if kind in ("hstripes", "vstripes"):
        period = rng.uniform(3.0, 5.0)
        coord = yy if kind == "hstripes" else xx
        phase = (coord + rng.uniform(0, period)) % period
        return period / 4 - np.abs(phase - period / 2)
    if kind == "cross":
        t = max(1.0, r * 0.3)
        arm = lambda a, b: np.minimum(t - np.abs(a), r * 1.2 - np.abs(b))  # noqa: E731
        return np.maximum(arm(dy, dx), arm(dx, dy))
    if kind == "triangle":
        return np.minimum.reduce([dy + r, r - dy, (dy + r) * 0.6 - np.abs(dx)])
    if kind == "ring":
        d = np.hypot(dy, dx)
        return np.minimum(r * 1.1 - d, d - r * 0.6)
    if kind == "diagonal":
        t = max(1.0, r * 0.25)
        return t - np.minimum(np.abs(dy - dx), np.abs(dy + dx)) / np.sqrt(2.0)
    if kind == "checker":
        cell = rng.uniform(2.5, 4.0)
        oy, ox = rng.uniform(0, cell, 2)
        return np.sin(np.pi * (yy + oy) / cell) * np.sin(np.pi * (xx + ox) / cell) * cell / 2
    if kind == "frame":
        return np.minimum(r - box, box - (r - 2.0))
    raise ValueError(f"unknown shape {kind}")


def _render(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    size, c = spec.image_size, spec.channels
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    # smooth background: base colour plus a gentle linear gradient
    base = rng.uniform(0.05, 0.45, (c, 1, 1)).astype(np.float32)
    gy, gx = rng.uniform(-0.15, 0.15, (2, c, 1, 1)).astype(np.float32)
    img = base + gy * (yy - 0.5) + gx * (xx - 0.5)
    fg = rng.uniform(0.55, 1.0, (c, 1, 1)).astype(np.float32)
    # a linear ramp of edge_width pixels at the boundary keeps edges anti-aliased
    alpha = np.clip(_shape_field(SHAPES[label], size, rng) / spec.edge_width + 0.5, 0.0, 1.0)[None]
    img = alpha * fg + (1.0 - alpha) * img
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Balanced parametric-shape images split into (train, test)."""
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.num_samples) % spec.num_classes
    rng.shuffle(labels)
    images = np.stack([_render(int(y), spec, rng) for y in labels])
    n_test = int(round(spec.num_samples * spec.test_fraction))
    n_train = spec.num_samples - n_test
    train = LabeledDataset(images[:n_train], labels[:n_train], spec.num_classes, "train")
    test = LabeledDataset(images[n_train:], labels[n_train:], spec.num_classes, "test")
    return train, test


def dataset_bytes(data: LabeledDataset, config_hash: str | None = None) -> bytes:
    c, h, w = data.image_shape
    header = NSDS_MAGIC + struct.pack("<6I", NSDS_VERSION, len(data), c, h, w, data.num_classes)
    rec = np.dtype([("img", "<f4", (c * h * w,)), ("label", "<u2")])
    body = np.empty(len(data), dtype=rec)
    body["img"] = data.images.reshape(len(data), -1)
    body["label"] = data.labels
    trailer = TRAILER_MAGIC + config_hash.encode("ascii") if config_hash else b""
    return header + body.tobytes() + trailer


def save_dataset(data: LabeledDataset, path, config_hash: str | None = None) -> None:
    Path(path).write_bytes(dataset_bytes(data, config_hash))


def parse_dataset(buf: bytes, split: str = "train") -> tuple[LabeledDataset, str | None]:
    r = Reader(buf)
    if r.take(4) != NSDS_MAGIC:
        raise FormatError("bad magic: not an NSDS dataset")
    version, count, c, h, w, classes = r.unpack("6I")
    if version != NSDS_VERSION:
        raise FormatError(f"unsupported NSDS version {version}")
    rec = np.dtype([("img", "<f4", (c * h * w,)), ("label", "<u2")])
    body = np.frombuffer(r.take(rec.itemsize * count), dtype=rec)
    config_hash = None
    if r.remaining():
        if r.take(4) != TRAILER_MAGIC:
            raise FormatError("unexpected bytes after dataset records")
        config_hash = r.take(r.remaining()).decode("ascii")
    images = body["img"].astype(np.float32).reshape(count, c, h, w)
    labels = body["label"].astype(np.int64)
    if count and labels.max() >= classes:
        raise FormatError(f"label {int(labels.max())} out of range for {classes} classes")
    if count and (images.min() < 0.0 or images.max() > 1.0):
        raise FormatError("pixel values outside [0, 1]")
    return LabeledDataset(images, labels, classes, split), config_hash


def load_dataset(path, split: str | None = None) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data, _ = parse_dataset(path.read_bytes(), split or path.stem)
    return data


def import_cifar_bin(path, num_classes: int = 10, split: str = "train") -> LabeledDataset:
    """Read the packed CIFAR-10 binary layout: 1 label byte + 3072 channel-major pixel bytes."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % 3073:
        raise FormatError("truncated CIFAR record stream")
    recs = raw.reshape(-1, 3073)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError("label out of range")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images, labels, num_classes, split)
