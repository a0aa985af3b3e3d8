"""Datasets, augmentation, splits and the default starting network."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import NetworkGraph, add_batchnorm, add_conv, add_dense

F32 = np.float32

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(ValueError):
    pass


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    tag: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DataError(f"{self.tag} split is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"{self.tag} labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, tag=None):
        return DatasetSplit(self.images[idx], self.labels[idx], tag or self.tag, self.num_classes)


def merge(a: DatasetSplit, b: DatasetSplit, tag="trainval") -> DatasetSplit:
    return DatasetSplit(np.concatenate([a.images, b.images]),
                        np.concatenate([a.labels, b.labels]), tag, a.num_classes)


@dataclass
class Dataset:
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit
    stats: tuple = field(default=None, repr=False)

    @property
    def trainval(self):
        return merge(self.train, self.val)


# -- CIFAR-10 binary -----------------------------------------------------------

def _read_cifar_file(path):
    if not os.path.exists(path):
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: {raw.size} bytes is not a whole number of "
                        f"{CIFAR_RECORD}-byte records (truncated file?)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataError(f"{path}: label {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(F32) / F32(255.0)
    return images, labels


def load_cifar10(directory):
    """Read the standard binary batches; returns unnormalized ``(train, test)``."""
    parts = [_read_cifar_file(os.path.join(directory, f)) for f in CIFAR_TRAIN_FILES]
    train = DatasetSplit(np.concatenate([p[0] for p in parts]),
                         np.concatenate([p[1] for p in parts]), "train")
    timg, tlab = _read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    return train, DatasetSplit(timg, tlab, "test")


# -- splitting and normalization ---------------------------------------------

def split_train_val(train: DatasetSplit, val_size, seed=0):
    """Stratified, seeded split into ``(train, val)``.

    ``val_size`` is either a count or a fraction in (0, 1).
    """
    n = len(train)
    if isinstance(val_size, float):
        if not 0 < val_size < 1:
            raise DataError(f"fractional validation size must lie in (0, 1), got {val_size}")
        val_size = int(round(n * val_size))
    val_size = int(val_size)
    if not 0 < val_size < n:
        raise DataError(f"validation size {val_size} must lie strictly between 0 and {n}")
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(train.labels == c)) for c in range(train.num_classes)]
    quota = np.array([len(ix) for ix in by_class], dtype=np.float64) * val_size / n
    take = np.floor(quota).astype(int)
    # largest remainders get the leftover slots
    for c in np.argsort(-(quota - take), kind="stable")[: val_size - take.sum()]:
        take[c] += 1
    val_idx = np.sort(np.concatenate([ix[:t] for ix, t in zip(by_class, take)]))
    mask = np.ones(n, bool)
    mask[val_idx] = False
    return train.subset(np.flatnonzero(mask), "train"), train.subset(val_idx, "val")


def channel_stats(split: DatasetSplit):
    mean = split.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = split.images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(F32), np.maximum(std, 1e-8).astype(F32)


def normalize(split: DatasetSplit, stats) -> DatasetSplit:
    mean, std = stats
    imgs = ((split.images - mean[None, :, None, None]) / std[None, :, None, None]).astype(F32)
    return replace(split, images=imgs)


def prepare(train: DatasetSplit, test: DatasetSplit, val_size, seed=0) -> Dataset:
    """Carve out the validation split and normalize with training statistics only."""
    tr, va = split_train_val(train, val_size, seed)
    stats = channel_stats(tr)
    return Dataset(normalize(tr, stats), normalize(va, stats), normalize(test, stats), stats)


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    pad: int = 4
    crop: tuple | None = None  # defaults to the input size
    horizontal_flip_prob: float = 0.5
    enabled: bool = True


def augment(batch, policy: AugmentationPolicy, rng):
    """Zero-pad, random crop and random horizontal flip (training batches only)."""
    if not policy.enabled:
        return batch
    n, c, h, w = batch.shape
    ch, cw = policy.crop or (h, w)
    p = policy.pad
    if ch > h + 2 * p or cw > w + 2 * p:
        raise DataError(f"crop {ch}x{cw} exceeds padded size {h + 2 * p}x{w + 2 * p}")
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
    ys = rng.integers(0, h + 2 * p - ch + 1, n)
    xs = rng.integers(0, w + 2 * p - cw + 1, n)
    flips = rng.random(n) < policy.horizontal_flip_prob
    out = np.empty((n, c, ch, cw), F32)
    for i in range(n):
        img = padded[i, :, ys[i]:ys[i] + ch, xs[i]:xs[i] + cw]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


# -- synthetic task ------------------------------------------------------------

def make_synthetic(num_classes=10, n_per_class=100, image_size=16, seed=0,
                   noise=1.3, val_per_class=None, test_per_class=None):
    """Oriented-grating classification task, generated deterministically.

    Class ``k`` is a sinusoidal grating whose orientation is ``k*pi/num_classes``
    with random phase, spatial frequency, contrast and colour mix, plus pixel
    noise. Returns a normalized :class:`Dataset` with exactly balanced splits.
    """
    if n_per_class < 10:
        raise DataError("synthetic task needs at least 10 samples per class")
    val_per_class = n_per_class // 4 if val_per_class is None else val_per_class
    test_per_class = n_per_class // 4 if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) / image_size

    def draw(per_class, tag):
        labels = np.repeat(np.arange(num_classes), per_class)
        m = labels.size
        theta = labels * np.pi / num_classes + rng.normal(0, 0.04, m)
        freq = rng.uniform(2.0, 4.0, m)
        phase = rng.uniform(0, 2 * np.pi, m)
        contrast = rng.uniform(0.6, 1.0, m)
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        grating = contrast[:, None, None] * np.sin(2 * np.pi * freq[:, None, None] * proj
                                                   + phase[:, None, None])
        colour = rng.uniform(0.3, 1.0, (m, 3))
        imgs = colour[:, :, None, None] * grating[:, None]
        imgs += rng.normal(0, noise, imgs.shape)
        order = rng.permutation(m)
        return DatasetSplit(imgs[order].astype(F32), labels[order], tag, num_classes)

    train = draw(n_per_class, "train")
    val = draw(val_per_class, "val")
    test = draw(test_per_class, "test")
    stats = channel_stats(train)
    return Dataset(normalize(train, stats), normalize(val, stats), normalize(test, stats), stats)


# -- starting architecture -----------------------------------------------------

def make_initial_model(input_shape=(3, 32, 32), num_classes=10, channels=16, seed=0):
    """Conv-MaxPool-Conv-MaxPool-Conv-FC-Softmax, each Conv being Conv-BN-ReLU.

    ``channels`` is an int or a 3-sequence of per-conv widths.
    """
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise DataError(f"spatial dims {h}x{w} must be divisible by 4 (two 2x2 pools)")
    widths = [channels] * 3 if isinstance(channels, int) else list(channels)
    rng = np.random.default_rng(seed)
    g = NetworkGraph()
    x = g.add("Input", attrs=dict(channels=c, height=h, width=w))
    cin = c
    for i, cout in enumerate(widths):
        x = add_conv(g, x, cin, cout, 3, rng)
        x = add_batchnorm(g, x, cout)
        x = g.add("Relu", [x])
        cin = cout
        if i < 2:
            x = g.add("MaxPool", [x], dict(pool=2))
    x = g.add("Flatten", [x])
    x = add_dense(g, x, cin * (h // 4) * (w // 4), num_classes, rng)
    g.output_id = g.add("Softmax", [x])
    g.validate()
    return g
