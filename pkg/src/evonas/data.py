"""Dataset container, binary file format, and the synthetic benchmark.

File format (little-endian throughout): magic ``UEDS``, version u32, N u32,
C u32, H u32, W u32, class_count u32, then N*C*H*W bytes of u8 pixels, then
N bytes of u8 labels.

Synthetic benchmark
-------------------
Each class is an oriented sinusoidal grating with a *random phase* per
sample:

    class k  ->  orientation (k mod 5) * 36 degrees (jittered per sample),
                 frequency 4 cycles for k < 5, 8 cycles for k >= 5

    pixel(x, y) = 0.5 + a_c * sin(2*pi*f*(x*cos(t) + y*sin(t))/size + phi)
                  + gaussian noise

with per-channel amplitude jitter a_c around 0.22 and noise sigma 0.18.  The
random phase makes every class's pixel-wise mean identical, so no linear
model on raw pixels can separate the classes (each class projects onto any
hyperplane as a distribution symmetric about the same center), while a small
CNN recovers orientation/frequency energy with one rectified conv layer and
pooling.  This preserves the accuracy ordering the search needs without real
image data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import as_rng

MAGIC = b"UEDS"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]


def save_dataset(ds: Dataset, path) -> None:
    pixels = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<6I", VERSION, n, c, h, w, ds.class_count))
        f.write(pixels.tobytes())
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()

    def need(offset, count, what):
        if offset + count > len(data):
            raise DatasetFormatError(f"truncated dataset: {what} at byte {offset}")
        return data[offset:offset + count]

    if need(0, 4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic at byte 0")
    version, n, c, h, w, classes = struct.unpack("<6I", need(4, 24, "header"))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 4")
    if n == 0:
        raise DatasetFormatError("empty dataset (N=0) at byte 8")
    body = 28
    npix = n * c * h * w
    pixels = np.frombuffer(need(body, npix, "pixels"), dtype=np.uint8)
    labels = np.frombuffer(need(body + npix, n, "labels"), dtype=np.uint8)
    if body + npix + n != len(data):
        raise DatasetFormatError(f"trailing bytes at byte {body + npix + n}")
    images = (pixels.reshape(n, c, h, w).astype(np.float32)) / 255.0
    return Dataset(images=images, labels=labels.astype(np.int64),
                   class_count=int(classes))


def generate_synthetic(classes: int, per_class: int, size: int, seed: int,
                       channels: int = 3) -> Dataset:
    """Oriented-grating dataset; see module docstring for the construction."""
    if size < 32:
        raise ValueError(f"size must be >= 32 to survive five poolings, got {size}")
    if classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    rng = as_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((classes * per_class, channels, size, size), np.float32)
    labels = np.empty(classes * per_class, np.int64)
    i = 0
    for k in range(classes):
        theta0 = (k % 5) * (np.pi / 5.0)
        freq = 4.0 if k < 5 else 8.0
        for _ in range(per_class):
            theta = theta0 + rng.uniform(-0.10, 0.10)
            wave = (np.cos(theta) * xx + np.sin(theta) * yy) / size
            phi = rng.uniform(0.0, 2.0 * np.pi)
            f_jit = freq * rng.uniform(0.92, 1.08)
            grating = np.sin(2.0 * np.pi * f_jit * wave + phi)
            amp = 0.22 * rng.uniform(0.7, 1.3, channels).astype(np.float32)
            img = 0.5 + amp[:, None, None] * grating[None, :, :]
            img += rng.normal(0.0, 0.18, img.shape)
            images[i] = img
            labels[i] = k
            i += 1
    images = np.clip(images, 0.0, 1.0)
    # quantize like the on-disk format so generate == save + load
    images = np.round(images * 255.0).astype(np.uint8).astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, class_count=classes)


def split_dataset(ds: Dataset, val_fraction: float, seed: int):
    """Random holdout split; returns (train, val)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = as_rng(seed)
    perm = rng.permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("split leaves no training data")
    mk = lambda idx: Dataset(images=ds.images[idx], labels=ds.labels[idx],
                             class_count=ds.class_count)
    return mk(np.sort(train_idx)), mk(np.sort(val_idx))


def norm_stats(images: np.ndarray):
    """Per-channel mean/std; compute on the training split only."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    images = (ds.images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return Dataset(images=images.astype(np.float32), labels=ds.labels,
                   class_count=ds.class_count)
