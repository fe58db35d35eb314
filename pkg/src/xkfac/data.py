"""Dataset ingestion and task generation.

MNIST is read from the standard IDX container.  Permuted tasks apply one
seeded pixel permutation to every image.  A small synthetic shape dataset
exists to exercise the conv path at desk scale, and a synthetic digit
surrogate stands in for MNIST on machines without the IDX files.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "XKFAC_DATA_DIR"


@dataclass
class Dataset:
    images: np.ndarray   # features x examples, values in [0, 1]
    labels: np.ndarray   # int64, values in [0, classes)
    classes: int
    split: str = "all"

    @property
    def n(self):
        return self.images.shape[1]

    def subset(self, idx, split=None):
        return Dataset(self.images[:, idx], self.labels[idx], self.classes,
                       split or self.split)


def _read_exact(f, count, path, what):
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(
            f"{path}: truncated file while reading {what} "
            f"(missing {count - len(buf)} bytes)")
    return buf


def load_mnist_idx(images_path, labels_path):
    """Load an IDX image/label file pair; pixels are scaled by 1/255."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path, "image header"))
        if magic != IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad magic {magic:#010x}, "
                             f"expected {IMAGES_MAGIC:#010x}")
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        images = images.reshape(count, rows * cols).T
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(
            ">II", _read_exact(f, 8, labels_path, "label header"))
        if magic != LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad magic {magic:#010x}, "
                             f"expected {LABELS_MAGIC:#010x}")
        raw = _read_exact(f, lcount, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != lcount:
        raise ValueError(f"image count {count} != label count {lcount}")
    return Dataset(images, labels, classes=int(labels.max()) + 1 if lcount else 0)


def find_mnist(data_dir=None):
    """Locate the MNIST training IDX pair, or return None."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        return None
    imgs = os.path.join(data_dir, "train-images-idx3-ubyte")
    lbls = os.path.join(data_dir, "train-labels-idx1-ubyte")
    if os.path.exists(imgs) and os.path.exists(lbls):
        return imgs, lbls
    return None


def permute_task(base: Dataset, seed: int) -> Dataset:
    """Apply one fixed seeded pixel permutation to every image.

    Seed 0 is the identity task (the original dataset).
    """
    if seed == 0:
        return Dataset(base.images.copy(), base.labels.copy(), base.classes,
                       base.split)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(base.images.shape[0])
    return Dataset(base.images[perm], base.labels.copy(), base.classes,
                   base.split)


def split(ds: Dataset, val_fraction: float, seed: int):
    """Disjoint stratified train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in range(ds.classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_val = int(round(val_fraction * idx.size))
        if n_val == 0 or n_val == idx.size:
            raise ValueError("degenerate split for class %d" % cls)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")


def synthetic_conv_dataset(seed=0, n=600, size=8, classes=3):
    """Seeded 8x8 single-channel shape images for the conv-path tests."""
    rng = np.random.default_rng(seed)
    images = np.zeros((size * size, n))
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        cy, cx = rng.integers(2, size - 2, size=2)
        img = np.zeros((size, size))
        if labels[i] == 0:       # filled square
            img[max(cy - 2, 0):cy + 2, max(cx - 2, 0):cx + 2] = 1.0
        elif labels[i] == 1:     # diagonal stripe
            img[np.abs((yy - cy) - (xx - cx)) <= 1] = 1.0
        else:                    # ring
            r = np.hypot(yy - cy, xx - cx)
            img[(r >= 1.0) & (r <= 2.5)] = 1.0
        img += 0.1 * rng.standard_normal((size, size))
        images[:, i] = np.clip(img, 0.0, 1.0).ravel()
    return Dataset(images, labels.astype(np.int64), classes)


def synthetic_digits(seed=0, n=12000, features=784, classes=10,
                     prototypes_per_class=3, noise=0.25):
    """Deterministic MNIST surrogate: smoothed class prototypes plus noise.

    Used by the permuted-task experiment when no MNIST IDX files are
    available.  Values are in [0, 1] and classes overlap enough that a small
    MLP does not reach 100% accuracy.
    """
    rng = np.random.default_rng(seed)
    side = int(np.sqrt(features))
    protos = np.empty((classes, prototypes_per_class, features))
    for c in range(classes):
        for p in range(prototypes_per_class):
            img = rng.standard_normal((side, side))
            for _ in range(3):  # cheap low-pass to get MNIST-like blobs
                img = (img + np.roll(img, 1, 0) + np.roll(img, -1, 0)
                       + np.roll(img, 1, 1) + np.roll(img, -1, 1)) / 5.0
            img = (img - img.min()) / (img.max() - img.min() + 1e-12)
            protos[c, p] = img.ravel()
    labels = rng.integers(0, classes, size=n)
    which = rng.integers(0, prototypes_per_class, size=n)
    images = protos[labels, which].T.copy()
    images += noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes)
