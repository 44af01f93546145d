"""Dataset ingestion and batching.

Supported sources: IDX image/label file pairs (big-endian, magic-checked),
CIFAR-10 binary batches (3073-byte records, channel-planar), and a
deterministic synthetic blob generator. Pixels are scaled by 1/255 and no
further normalization is applied, so attack budgets stay in natural pixel
units (epsilon 8/255 means exactly 8 gray levels).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ParameterError
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    """Images (N, H, L, C) in [0, 1] plus integer labels in [0, classes)."""

    images: Tensor
    labels: np.ndarray
    classes: int
    name: str = ""

    def __post_init__(self):
        imgs = self.images.data
        if imgs.ndim != 4:
            raise DataFormatError(f"images must be 4-D NHWC, got shape {imgs.shape}")
        if imgs.shape[0] != len(self.labels):
            raise DataFormatError(
                f"{imgs.shape[0]} images but {len(self.labels)} labels"
            )
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise DataFormatError("image values outside [0, 1]")
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise DataFormatError("label outside [0, classes)")
        self.labels = labels.astype(np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(
            images=Tensor(self.images.data[idx]),
            labels=self.labels[idx],
            classes=self.classes,
            name=self.name,
        )

    def fingerprint(self):
        import zlib

        h = zlib.crc32(self.images.data.tobytes())
        h = zlib.crc32(self.labels.tobytes(), h)
        return f"{h:08x}"


class BatchIterator:
    """Minibatch stream; each epoch is a full permutation determined by
    (seed, epoch), so iteration order is reproducible."""

    def __init__(self, dataset, batch_size, seed=0):
        if batch_size < 1:
            raise ParameterError(f"batch size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, epoch_index):
        order = np.random.default_rng([self.seed, epoch_index]).permutation(len(self.dataset))
        images = self.dataset.images.data
        labels = self.dataset.labels
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield Tensor(images[idx]), labels[idx]


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_exact(f, count, offset, what):
    data = f.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated {what}: wanted {count} bytes", offset=offset)
    return data


def load_idx_images(path):
    """Pixel array (N, rows, cols, 1) in [0, 1] from an IDX image file
    (big-endian, magic 0x00000803)."""
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, 0, "IDX image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"bad IDX image magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x})", offset=0
            )
        raw = _read_exact(f, n * rows * cols, 16, "IDX image payload")
        if f.read(1):
            raise DataFormatError("trailing bytes after IDX image payload", offset=16 + n * rows * cols)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols, 1)
    return (pixels / 255.0).astype(np.float32)


def load_idx_labels(path):
    """Label vector from an IDX label file (big-endian, magic 0x00000801)."""
    with open(path, "rb") as f:
        magic, n = struct.unpack(">II", _read_exact(f, 8, 0, "IDX label header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"bad IDX label magic 0x{magic:08x} (expected 0x{IDX_LABEL_MAGIC:08x})", offset=0
            )
        raw = _read_exact(f, n, 8, "IDX label payload")
        if f.read(1):
            raise DataFormatError("trailing bytes after IDX label payload", offset=8 + n)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, classes=None, name=None):
    """Load an IDX image/label file pair into a Dataset.

    Image files carry magic 0x00000803 and dims (count, rows, cols); label
    files carry magic 0x00000801 and a count. Pixel bytes are scaled by
    1/255; a channel axis of size 1 is appended.
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(labels) != images.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {len(labels)} labels", offset=4)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(
        images=Tensor(images),
        labels=labels,
        classes=classes,
        name=name or Path(images_path).stem,
    )


def save_idx(dataset, images_path, labels_path):
    """Write a Dataset as an IDX pair. Pixels are quantized to the nearest
    1/255 step; datasets already on that grid round-trip exactly."""
    imgs = dataset.images.data
    if imgs.shape[3] != 1:
        raise ParameterError("IDX files hold single-channel images")
    n, rows, cols, _ = imgs.shape
    pixel_bytes = np.round(imgs[..., 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixel_bytes.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def load_cifar10_binary(path, split="train"):
    """Load CIFAR-10 binary batches from a directory (standard 5 train + 1
    test file layout) or a single .bin file. Records are 1 label byte plus
    3072 channel-planar pixel bytes; output is HWC interleaved in [0, 1]."""
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise DataFormatError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    else:
        files = [path]

    images, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{f}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}",
                offset=(raw.size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES,
            )
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0])
        planar = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    return Dataset(
        images=Tensor((images / 255.0).astype(np.float32)),
        labels=labels.astype(np.int64),
        classes=10,
        name=f"cifar10-{split}" if path.is_dir() else path.stem,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_blobs(classes, n_per_class, dim, separation, seed, sigma=0.1, image_shape=None):
    """Gaussian class clusters centered on distinct hypercube vertices pulled
    toward the box center by ``separation`` (1.0 puts centers on the
    corners), with per-pixel noise of scale ``sigma``, clamped to [0, 1] and
    quantized to the 1/255 grid so IDX round-trips are exact.

    ``image_shape`` reshapes each example to (H, L, C); default (dim, 1, 1).
    """
    if n_per_class < 1:
        raise ParameterError(f"need at least one example per class, got {n_per_class}")
    if classes < 1:
        raise ParameterError(f"need at least one class, got {classes}")
    if image_shape is None:
        image_shape = (dim, 1, 1)
    if int(np.prod(image_shape)) != dim:
        raise ParameterError(f"image_shape {image_shape} does not hold {dim} values")

    rng = np.random.default_rng(seed)
    vertices = _distinct_vertices(classes, dim, rng)
    centers = 0.5 + (vertices - 0.5) * separation

    n = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + rng.normal(0.0, sigma, size=(n, dim))
    x = np.clip(x, 0.0, 1.0)
    x = np.round(x * 255.0) / 255.0
    order = rng.permutation(n)
    images = x[order].reshape(n, *image_shape).astype(np.float32)
    return Dataset(
        images=Tensor(images),
        labels=labels[order],
        classes=classes,
        name=f"blobs-c{classes}-d{dim}",
    )


def _distinct_vertices(classes, dim, rng):
    if 2**min(dim, 30) < classes:
        raise ParameterError(f"{dim} dimensions cannot host {classes} distinct vertices")
    seen = set()
    out = []
    while len(out) < classes:
        v = rng.integers(0, 2, size=dim)
        key = v.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(v)
    return np.array(out, dtype=np.float64)
