"""Datasets: seeded synthetic generators and the CIFAR-10 binary format.

A CIFAR-10 binary file is a concatenation of 3073-byte records: one label
byte (0-9) followed by 3072 pixel bytes, the 1024 red values first, then
green, then blue, each channel in row-major order over a 32x32 image.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import DataError
from .training import Dataset

__all__ = [
    "CIFAR_RECORD_BYTES",
    "read_cifar10_binary",
    "write_cifar10_binary",
    "load_cifar10_binary",
    "synthetic_blobs",
    "synthetic_images",
    "standardize",
]

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)


def read_cifar10_binary(path):
    """Raw ``uint8`` images ``[n, 3, 32, 32]`` and ``int64`` labels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return records[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def write_cifar10_binary(path, images, labels):
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != CIFAR_SHAPE or images.shape[0] != labels.shape[0]:
        raise DataError("images must be [n, 3, 32, 32] with one label each")
    if images.min() < 0 or images.max() > 255 or labels.min() < 0 or labels.max() > 9:
        raise DataError("pixel values must be bytes and labels in 0..9")
    records = np.empty((labels.shape[0], CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(labels.shape[0], -1)
    records.tofile(path)


def standardize(train, test):
    """Per-channel standardization with statistics of ``train``."""
    axes = (0,) if train.ndim == 2 else (0, 2, 3)
    mean = train.mean(axis=axes, keepdims=True)
    std = train.std(axis=axes, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return (train - mean) / std, (test - mean) / std


def _subset(x, y, size):
    if size is None:
        return x, y
    if size > x.shape[0]:
        raise DataError(f"subset of {size} requested from {x.shape[0]} records")
    return x[:size], y[:size]


def load_cifar10_binary(train_files, test_files, train_subset=None, test_subset=None):
    """Load, subset and standardize CIFAR-10 binary batches.

    ``train_files``/``test_files`` are paths or lists of paths; a directory
    path is expanded to the standard ``data_batch_*.bin``/``test_batch.bin``.
    """
    def collect(files):
        if isinstance(files, (str, os.PathLike)):
            files = [files]
        xs, ys = zip(*(read_cifar10_binary(f) for f in files))
        return np.concatenate(xs), np.concatenate(ys)

    xtr, ytr = _subset(*collect(train_files), train_subset)
    xte, yte = _subset(*collect(test_files), test_subset)
    xtr, xte = standardize(xtr.astype(np.float64) / 255.0, xte.astype(np.float64) / 255.0)
    return Dataset(xtr, ytr, xte, yte, 10)


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def synthetic_blobs(classes=2, dim=16, n=512, seed=0, n_test=None, spread=1.0, separation=4.0):
    """Gaussian class blobs with centers ``separation`` apart on average."""
    rng = _rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= separation / max(np.sqrt(2.0 * dim), 1e-12)
    n_test = n // 4 if n_test is None else n_test

    def draw(count):
        y = rng.integers(0, classes, count)
        x = centers[y] + spread / math.sqrt(dim) * rng.standard_normal((count, dim))
        return x, y

    xtr, ytr = draw(n)
    xte, yte = draw(n_test)
    xtr, xte = standardize(xtr, xte)
    return Dataset(xtr, ytr.astype(np.int64), xte, yte.astype(np.int64), classes)


def _smooth_field(rng, channels, size, waves=4):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(waves):
            fy, fx = rng.uniform(-2.0, 2.0, 2) * 2 * np.pi / size
            phase = rng.uniform(0, 2 * np.pi)
            field[c] += rng.standard_normal() * np.cos(fy * yy + fx * xx + phase)
    return field


def synthetic_images(classes=10, n=4000, n_test=1000, channels=3, size=8, prototypes=3,
                     pixel_noise=0.5, seed=0):
    """Image-like textures: each class owns a few smooth random prototypes.

    A sample is a prototype with a random gain, a random circular shift of
    up to one pixel per axis and additive Gaussian pixel noise.
    """
    rng = _rng(seed)
    protos = np.stack([
        np.stack([_smooth_field(rng, channels, size) for _ in range(prototypes)])
        for _ in range(classes)
    ])

    def draw(count):
        y = rng.integers(0, classes, count)
        k = rng.integers(0, prototypes, count)
        x = protos[y, k] * rng.uniform(0.7, 1.3, (count, 1, 1, 1))
        shifts = rng.integers(-1, 2, (count, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (dy, dx), axis=(1, 2))
        x += pixel_noise * rng.standard_normal(x.shape)
        return x, y

    xtr, ytr = draw(n)
    xte, yte = draw(n_test)
    xtr, xte = standardize(xtr, xte)
    return Dataset(xtr, ytr.astype(np.int64), xte, yte.astype(np.int64), classes)
