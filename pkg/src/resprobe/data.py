"""Dataset loading: CIFAR binary records, IDX files, and synthetic clusters.

Images are stored as N x C x H x W float arrays standardised per channel
with statistics from the training split; the same statistics are reused
for held-out splits.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

CIFAR_PIXELS = 3 * 32 * 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    class_count: int
    mean: np.ndarray | None = None  # per-channel statistics used for normalisation
    std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(ad.get_default_dtype())


def make_dataset(raw: np.ndarray, labels, split: str, class_count: int, stats=None) -> Dataset:
    """Standardise ``raw`` with ``stats`` (or its own statistics when None)."""
    raw = np.asarray(raw, dtype=np.float64)
    mean, std = stats if stats is not None else channel_stats(raw)
    return Dataset(normalize(raw, mean, std), labels, split, class_count, np.asarray(mean), np.asarray(std))


def balanced_subset(labels: np.ndarray, size: int, class_count: int, seed: int) -> np.ndarray:
    """Indices of a seeded class-balanced subset, sorted ascending."""
    if size >= len(labels):
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    per, extra = divmod(size, class_count)
    picked = []
    for c in range(class_count):
        pool = np.flatnonzero(labels == c)
        want = per + (1 if c < extra else 0)
        if want > len(pool):
            raise ValueError(f"class {c} has only {len(pool)} samples, {want} requested")
        picked.append(rng.choice(pool, size=want, replace=False))
    return np.sort(np.concatenate(picked))


# ---------------------------------------------------------------------------
# CIFAR binary


def read_cifar_records(path, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``label_bytes`` label(s) + 3072 pixel bytes per record.

    For the 100-class layout (``label_bytes=2``) the fine label is returned.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        offset = (len(raw) // rec) * rec
        raise ValueError(f"truncated CIFAR record at byte offset {offset} in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _cifar_files(path: Path, split: str, label_bytes: int) -> list[Path]:
    if path.is_file():
        return [path]
    if label_bytes == 1:
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    else:
        names = ["train.bin"] if split == "train" else ["test.bin"]
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR files: {', '.join(missing)}")
    return files


def load_cifar_binary(
    path,
    subset_size: int | None = None,
    seed: int = 0,
    split: str = "train",
    classes: int = 10,
    stats=None,
) -> Dataset:
    """Load CIFAR-10/100 binary batches from a file or the extracted directory.

    Pixels are scaled to [0, 1] and standardised (own statistics unless
    ``stats`` is given); ``subset_size`` draws a seeded class-balanced subset.
    """
    label_bytes = 1 if classes == 10 else 2
    parts = [read_cifar_records(f, label_bytes) for f in _cifar_files(Path(path), split, label_bytes)]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if subset_size is not None:
        idx = balanced_subset(labels, subset_size, classes, seed)
        images, labels = images[idx], labels[idx]
    return make_dataset(images / 255.0, labels, split, classes, stats)


def write_cifar_records(path, images: np.ndarray, labels, coarse=None) -> None:
    """Write uint8 images (N,3,32,32) in the CIFAR binary record layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None], images]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.hstack(cols).tobytes())


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX writer handles 3-d image stacks or 1-d label vectors")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def default_label_path(images_path) -> Path:
    p = Path(images_path)
    name = p.name.replace("images-idx3", "labels-idx1").replace("images", "labels")
    return p.with_name(name)


def load_idx(path, labels_path=None, split: str = "train", class_count: int | None = None, stats=None) -> Dataset:
    """Load an IDX image file and its label file as a single-channel Dataset."""
    images = read_idx(path)
    if images.ndim != 3:
        raise ValueError(f"{path}: expected a 3-d image file, got {images.ndim} dims")
    labels = read_idx(labels_path or default_label_path(path))
    if labels.ndim != 1:
        raise ValueError("label file must be 1-d")
    if len(labels) != len(images):
        raise ValueError(f"label count {len(labels)} does not match image count {len(images)}")
    k = class_count or int(labels.max()) + 1
    return make_dataset(images[:, None, :, :] / 255.0, labels.astype(np.int64), split, k, stats)


# ---------------------------------------------------------------------------
# synthetic


def synthetic_clusters(
    n_per_class: int,
    class_count: int,
    image_shape=(1, 8, 8),
    separation: float = 3.0,
    seed: int = 0,
    split: str = "train",
    stats=None,
) -> Dataset:
    """Class-conditional unit-variance Gaussian blobs laid out as images.

    Class means are ``separation`` times random unit directions, so pairs
    are roughly ``separation * sqrt(2)`` apart; the means depend only on
    ``seed``'s first draw, letting a held-out split share them.
    """
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    d = int(np.prod(image_shape))
    dirs = rng.normal(size=(class_count, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sample_rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(class_count), n_per_class)
    x = separation * dirs[labels] + sample_rng.normal(size=(len(labels), d))
    images = x.reshape((len(labels),) + tuple(image_shape))
    return make_dataset(images, labels, split, class_count, stats)


def shuffled_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 1]).permutation(n)
