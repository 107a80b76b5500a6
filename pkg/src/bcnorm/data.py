"""Datasets: deterministic synthetic images and the CIFAR-10 binary format.

The synthetic task is image classification with K classes.  A class-k
image is a deterministic base pattern, whose per-channel means are the
spec's class/channel offsets, plus a zero-mean spatial grating unique to
the class, plus Gaussian pixel noise, clipped to [0, 1].  The grating
carries class information that survives per-sample standardization, so
normalizers that remove per-channel means (e.g. instance statistics)
can still learn the task.

CIFAR-10 binary files are sequences of 3073-byte records: one label
byte (0-9) followed by 3072 pixel bytes as three 1024-byte channel
planes (R, G, B), each a row-major 32x32 grid.  Pixels load as
float64 / 255.
"""

from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite pixel values")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]


def default_class_means(classes, channels=3, separation=0.5):
    """Per-class channel means at 0.5 +- separation/2, distinct binary codes."""
    if classes > 2 ** channels:
        raise ValueError(
            f"only {2 ** channels} default mean codes exist for {channels} channels; "
            f"pass explicit class means for {classes} classes"
        )
    lo, hi = 0.5 - separation / 2.0, 0.5 + separation / 2.0
    means = np.empty((classes, channels))
    for k in range(classes):
        for c in range(channels):
            means[k, c] = hi if (k >> c) & 1 else lo
    return means


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic classification dataset."""

    classes: int = 4
    height: int = 12
    width: int = 12
    samples_per_class: int = 500
    class_means: np.ndarray = None  # (classes, channels); default binary code
    noise: float = 0.25
    pattern_amp: float = 0.15
    seed: object = 0
    channels: int = 3
    mean_separation: float = 0.5

    def resolved_means(self):
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape != (self.classes, self.channels):
                raise ValueError(
                    f"class_means must be ({self.classes}, {self.channels}), got {means.shape}"
                )
            return means
        return default_class_means(self.classes, self.channels, self.mean_separation)

    def validate(self):
        if self.classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("degenerate image shape")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")
        self.resolved_means()


def _class_pattern(k, channels, height, width):
    """Zero-mean grating, frequency and orientation chosen by class index.

    Integer cycle counts over the grid make the spatial mean exactly zero,
    so the grating never disturbs the class/channel mean offsets.
    """
    fh = 1 + (k % 3)
    fw = 1 + ((k // 3) % 3)
    h = np.arange(height)[:, None] / height
    w = np.arange(width)[None, :] / width
    phase = 2.0 * np.pi * (np.arange(channels) / max(channels, 1))
    grid = 2.0 * np.pi * (fh * h + fw * w)
    return np.cos(grid[None, :, :] + phase[:, None, None])


def gen_synthetic(spec):
    """Generate the dataset the spec describes; bit-identical for equal seeds."""
    spec.validate()
    means = spec.resolved_means()
    rng = np.random.default_rng(spec.seed)
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, spec.channels, spec.height, spec.width))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for k in range(spec.classes):
        base = means[k][:, None, None] + spec.pattern_amp * _class_pattern(
            k, spec.channels, spec.height, spec.width
        )
        block = base[None] + rng.normal(
            0.0, spec.noise, size=(spec.samples_per_class,) + base.shape
        ) if spec.noise > 0 else np.broadcast_to(
            base, (spec.samples_per_class,) + base.shape
        ).copy()
        images[row : row + spec.samples_per_class] = block
        labels[row : row + spec.samples_per_class] = k
        row += spec.samples_per_class
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, spec.classes)


def load_cifar10(path):
    """Parse a CIFAR-10 binary batch file into a Dataset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise ValueError(
            f"{path}: size {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise ValueError(f"{path}: label byte {labels.max()} out of range 0-9")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return Dataset(images.astype(np.float64) / 255.0, labels, CIFAR_CLASSES)


def save_cifar10(dataset, path):
    """Write a Dataset in CIFAR-10 binary layout (pixels quantized to bytes)."""
    if dataset.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(
            f"CIFAR-10 records are (3, {CIFAR_SIDE}, {CIFAR_SIDE}) images, "
            f"got {dataset.images.shape[1:]}"
        )
    if dataset.labels.size and dataset.labels.max() >= CIFAR_CLASSES:
        raise ValueError("labels exceed the 0-9 range of the format")
    n = len(dataset)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    records[:, 1:] = pixels.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def batches(dataset, batch_size, seed, drop_last=False):
    """Yield (images, labels) minibatches in a seeded shuffled order.

    With ``drop_last`` every batch has exactly ``batch_size`` samples (the
    ragged tail is discarded), which keeps batch statistics comparable
    across normalizers.
    """
    batch_size = int(batch_size)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if drop_last and batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
