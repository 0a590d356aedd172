"""Datasets: IDX reading/writing, normalization, synthetic blobs, subsampling."""

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (AlreadyNormalized, DegenerateDataset, FormatError,
                     InvalidGeometry, LabelMismatch, LabelsRequired,
                     TruncatedFile)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageDataset:
    """N x C x H x W float images with optional integer labels.

    Labels exist for evaluation only; nothing in training reads them.
    """

    images: np.ndarray
    labels: np.ndarray = None
    class_count: int = 0
    normalized: bool = False
    mean: object = 0.0
    std: object = 1.0

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if len(labels) != len(self.images):
                raise LabelMismatch(
                    f"{len(labels)} labels for {len(self.images)} images")
            count = self.class_count or (int(labels.max()) + 1 if len(labels) else 0)
            if len(labels) and (labels.min() < 0 or labels.max() >= count):
                raise LabelMismatch("labels outside [0, class_count)")
            object.__setattr__(self, "labels", labels.astype(np.int64))
            object.__setattr__(self, "class_count", count)

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return replace(self, images=self.images[indices], labels=labels)

    def fill_value(self):
        """What a raw zero pixel maps to under this dataset's normalization."""
        if not self.normalized:
            return 0.0
        fill = (0.0 - np.asarray(self.mean)) / np.asarray(self.std)
        return float(fill) if np.ndim(fill) == 0 else fill.reshape(-1, 1, 1)

    def denormalize(self, images=None):
        images = self.images if images is None else images
        if not self.normalized:
            return images
        mean, std = self.mean, self.std
        if np.ndim(mean):
            mean = np.asarray(mean).reshape(1, -1, 1, 1)
            std = np.asarray(std).reshape(1, -1, 1, 1)
        return images * std + mean


# IDX -----------------------------------------------------------------------

def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic, expected_rank):
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * expected_rank
    if len(blob) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{expected_rank}I", blob[4:header])
    count = int(np.prod(dims))
    payload = blob[header:]
    if len(payload) < count:
        raise TruncatedFile(f"{path}: expected {count} bytes of data, found {len(payload)}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, class_count=None):
    """Read IDX image (and label) files; gzip-compressed files are accepted.

    Pixel bytes are scaled to [0, 1].
    """
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if len(labels) != len(images):
            raise LabelMismatch(
                f"{labels_path}: {len(labels)} labels for {len(images)} images")
    return ImageDataset(images=images, labels=labels, class_count=class_count or 0)


def save_idx(dataset, images_path, labels_path=None, compress=None):
    """Write a single-channel dataset with pixels in [0, 1] as IDX files."""
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pixels.shape

    def write(path, header, payload):
        use_gzip = compress if compress is not None else str(path).endswith(".gz")
        opener = gzip.open if use_gzip else open
        with opener(path, "wb") as f:
            f.write(header)
            f.write(payload)

    write(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w), pixels.tobytes())
    if labels_path is not None:
        if dataset.labels is None:
            raise LabelsRequired("dataset has no labels to write")
        write(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n),
              dataset.labels.astype(np.uint8).tobytes())


# transforms ----------------------------------------------------------------

def normalize(dataset, per_channel=False):
    """Shift and scale to zero mean, unit variance using global statistics."""
    if dataset.normalized:
        raise AlreadyNormalized("dataset is already normalized")
    x = dataset.images.astype(np.float64)
    if per_channel:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        if np.any(std == 0):
            raise DegenerateDataset("a channel has zero variance")
        out = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    else:
        mean = float(x.mean())
        std = float(x.std())
        if std == 0:
            raise DegenerateDataset("dataset has zero variance")
        out = (x - mean) / std
    return replace(dataset, images=out.astype(dataset.images.dtype),
                   normalized=True, mean=mean, std=std)


def synthetic_blobs(n_classes, n_per_class, image_size=8, separation=1.0,
                    noise_sigma=0.1, seed=0):
    """Single-channel images, each class a bright square at its own grid cell."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    grid = int(np.ceil(np.sqrt(n_classes)))
    block = image_size // grid
    if block < 1:
        raise InvalidGeometry(
            f"{image_size}x{image_size} image cannot hold {n_classes} distinct blocks")
    rng = np.random.default_rng(seed)
    templates = np.zeros((n_classes, image_size, image_size))
    for c in range(n_classes):
        r, col = divmod(c, grid)
        templates[c, r * block:(r + 1) * block, col * block:(col + 1) * block] = separation
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    noise = rng.normal(0.0, noise_sigma, size=(len(labels), image_size, image_size))
    images = (templates[labels] + noise)[:, None].astype(np.float32)
    return ImageDataset(images=images, labels=labels, class_count=n_classes)


@dataclass(frozen=True)
class RetentionProfile:
    r_min: float
    class_count: int

    def __post_init__(self):
        if not 0 < self.r_min <= 1:
            raise ValueError("r_min must lie in (0, 1]")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")

    @property
    def rates(self):
        """Keep probability per class, linear from r_min (class 0) to 1 (last)."""
        if self.class_count == 1:
            return np.array([1.0])
        c = np.arange(self.class_count)
        rates = self.r_min + (1.0 - self.r_min) * c / (self.class_count - 1)
        rates[0], rates[-1] = self.r_min, 1.0
        return rates


def imbalanced_subsample(dataset, r_min, seed=0):
    """Keep each sample independently with its class's retention rate."""
    if dataset.labels is None:
        raise LabelsRequired("imbalanced subsampling needs labels")
    rates = RetentionProfile(r_min, dataset.class_count).rates
    rng = np.random.default_rng(seed)
    keep = rng.random(len(dataset)) < rates[dataset.labels]
    return dataset.subset(np.flatnonzero(keep))


def batch_iterator(n, batch_size, shuffle=True, seed=0):
    """Yield index arrays covering ``range(n)``; the last batch may be short.

    ``n`` may also be a dataset.  ``seed`` may be a ``numpy.random.Generator``
    so consecutive epochs draw fresh permutations from one stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(n) if not isinstance(n, (int, np.integer)) else int(n)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
