"""Dataset readers and small synthetic generators.

All loaders return ``(X, labels)`` with one sample per column of ``X``.
"""
import glob
import os

import numpy as np

from .exceptions import FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
DATA_DIR_ENV = "PROXPROP_DATA_DIR"


def read_cifar10_file(path, limit=None):
    """Read one CIFAR-10 binary batch file.

    Each record is one label byte followed by 3072 pixel bytes (red plane,
    green plane, blue plane, each 32x32 row-major). Pixels are scaled to
    [0, 1]; the result has shape ``(3072, N)``.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    X = records[:, 1:].T.astype(np.float64) / 255.0
    return X, labels


def cifar10_files(directory):
    """Training batches in order, then the test batch."""
    train = sorted(glob.glob(os.path.join(directory, "data_batch_*.bin")))
    test = sorted(glob.glob(os.path.join(directory, "test_batch.bin")))
    return train + test


def resolve_data_dir(directory=None):
    directory = directory or os.environ.get(DATA_DIR_ENV)
    if not directory:
        raise FileNotFoundError(f"no CIFAR-10 directory given and ${DATA_DIR_ENV} is unset")
    # accept the parent of the extracted archive as well
    nested = os.path.join(directory, "cifar-10-batches-bin")
    return nested if os.path.isdir(nested) else directory


def load_cifar10(directory=None, subset_size=None):
    """The first ``subset_size`` records across the batch files, in file order."""
    directory = resolve_data_dir(directory)
    files = cifar10_files(directory)
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 batch files in {directory}")
    Xs, ys = [], []
    remaining = subset_size
    for path in files:
        X, y = read_cifar10_file(path, limit=remaining)
        Xs.append(X)
        ys.append(y)
        if remaining is not None:
            remaining -= y.size
            if remaining <= 0:
                break
    return np.concatenate(Xs, axis=1), np.concatenate(ys)


def write_cifar10_file(path, X, labels):
    """Inverse of :func:`read_cifar10_file` for pixel values in [0, 1]."""
    pixels = np.clip(np.rint(np.asarray(X) * 255.0), 0, 255).astype(np.uint8).T
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    records.tofile(path)


def load_csv(path):
    """CSV with the integer label in the first column; a header row is skipped."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    labels = data[:, 0].astype(np.int64)
    if np.any(labels != data[:, 0]) or (labels.size and labels.min() < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    return np.ascontiguousarray(data[:, 1:].T), labels


def synth_blobs(n, classes, seed=0, std=0.3, radius=3.0):
    """Isotropic Gaussian blobs with centers evenly spaced on a circle.

    Labels cycle ``0, 1, ..., classes-1`` so every prefix is nearly balanced.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    angles = 2 * np.pi * labels / classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)])
    return centers + std * rng.standard_normal((2, n)), labels


def synth_moons(n, noise=0.1, seed=0):
    """Two interleaved half circles; with ``noise=0`` points lie on the arcs
    ``(cos t, sin t)`` and ``(1 - cos t, 1/2 - sin t)``, ``t`` in [0, pi]."""
    if n < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    t = np.empty(n)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        t[idx] = np.linspace(0.0, np.pi, idx.size)
    outer = np.stack([np.cos(t), np.sin(t)])
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    X = np.where(labels == 0, outer, inner)
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    return X, labels
