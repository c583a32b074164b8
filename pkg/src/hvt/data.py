"""Image datasets: the synthetic desk-scale task and the HVTD file format.

HVTD layout (little-endian)::

    "HVTD"            4 bytes magic
    version           u8 (= 1)
    n, H, W, C, K     5 x u32 (sample count, geometry, number of classes)
    labels            n x u16
    pixels            n*H*W*C x u8, channel-last, samples in order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng, STREAM_DATA

MAGIC = b"HVTD"
VERSION = 1
_HEADER = struct.Struct("<4sB5I")


class DatasetError(ValueError):
    """A dataset file or array is malformed."""


@dataclass
class Dataset:
    images: np.ndarray      # (n, H, W, C) uint8
    labels: np.ndarray      # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _bar(h, w, y, x, length, thick, horizontal):
    img = np.zeros((h, w))
    if horizontal:
        img[y:y + thick, x:x + length] = 1.0
    else:
        img[y:y + length, x:x + thick] = 1.0
    return img


def _pattern(label: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One glyph of the class's shape near the class's home position."""
    shape = label % 4
    # home rows differ per class; columns are centred so a horizontal flip
    # preserves the label
    size = max(2, h // 3)
    thick = max(1, h // 8)
    rows = (0.1, 0.55, 0.3, 0.75)
    jitter = max(1, h // 8)
    y = int(rows[(label + label // 4) % 4] * (h - size)) + int(rng.integers(-jitter, jitter + 1))
    x = (w - size) // 2 + int(rng.integers(-2 * jitter, 2 * jitter + 1))
    y, x = int(np.clip(y, 0, h - size)), int(np.clip(x, 0, w - size))
    if shape == 0:
        img = _bar(h, w, y + size // 2 - thick // 2, x, size, thick, True)
    elif shape == 1:
        img = _bar(h, w, y, x + size // 2 - thick // 2, size, thick, False)
    elif shape == 2:
        img = np.zeros((h, w))
        img[y:y + size, x:x + size] = 0.75
    else:
        img = np.zeros((h, w))
        r = np.arange(size)
        img[y + r, x + r] = 1.0
        img[y + r, x + size - 1 - r] = 1.0
    return img


def synth_dataset(seed: int, n_train: int, n_val: int, geometry=(16, 16, 1),
                  num_classes: int = 4, noise: float = 0.3) -> tuple[Dataset, Dataset]:
    """Class-conditional bars, blobs and crosses on a noisy background.

    Labels are assigned round-robin, so every class is within one sample of
    uniform. The same seed gives bit-identical splits.
    """
    if num_classes < 2:
        raise DatasetError("num_classes must be >= 2")
    h, w, c = geometry
    rng = make_rng(seed, STREAM_DATA)
    splits = []
    for name, n in (("train", n_train), ("val", n_val)):
        labels = np.arange(n) % num_classes
        rng.shuffle(labels)
        imgs = np.empty((n, h, w, c), dtype=np.uint8)
        for i, lab in enumerate(labels):
            glyph = _pattern(int(lab), h, w, rng)
            tint = 0.6 + 0.4 * rng.random(c)
            canvas = glyph[..., None] * tint + noise * rng.standard_normal((h, w, c)) + 0.15
            imgs[i] = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
        splits.append(Dataset(imgs, labels, num_classes, name))
    return splits[0], splits[1]


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.reshape(-1, ds.images.shape[-1]).astype(np.float64) / 255.0
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 0, std, 1.0)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images.astype(np.float64) / 255.0 - mean) / std


def encode_dataset(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    if ds.num_classes > 0xFFFF:
        raise DatasetError("HVTD stores labels as u16")
    header = _HEADER.pack(MAGIC, VERSION, n, h, w, c, ds.num_classes)
    return header + ds.labels.astype("<u2").tobytes() + ds.images.tobytes()


def decode_dataset(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetError("truncated HVTD header")
    magic, version, n, h, w, c, k = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"unsupported HVTD version {version}")
    off = _HEADER.size
    need = off + 2 * n + n * h * w * c
    if len(buf) != need:
        raise DatasetError(f"HVTD payload is {len(buf)} bytes, expected {need}")
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=off + 2 * n).reshape(n, h, w, c)
    return Dataset(pixels.copy(), labels, k, split)


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), split or path.stem)
