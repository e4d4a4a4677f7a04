"""MNIST / Fashion-MNIST ingestion from IDX files."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, UsageError, ValidationError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10
DATA_DIR_ENV = "SPTLAB_DATA_DIR"
DATASETS = ("mnist", "fmnist")
SPLIT_PREFIX = {"train": "train", "test": "t10k"}


@dataclass(frozen=True)
class Dataset:
    """Labelled gray-level images.

    ``pixels`` is either the raw uint8 payload (scaled by 1/255 on access)
    or float64 values already in [0, 1].
    """

    name: str
    split: str
    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise ValidationError(
                f"{len(self.pixels)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def images(self, index=None) -> np.ndarray:
        """Float64 images of shape (N, 1, 28, 28) in [0, 1]."""
        px = self.pixels if index is None else self.pixels[index]
        if px.dtype == np.uint8:
            px = px / 255.0
        else:
            px = np.asarray(px, dtype=np.float64)
        return px.reshape(len(px), 1, *px.shape[-2:])

    def subset(self, k: int | None) -> "Dataset":
        if k is None or k >= len(self):
            return self
        return Dataset(self.name, self.split, self.pixels[:k], self.labels[:k])

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(self.name, self.split, np.asarray(images, dtype=np.float64), self.labels)


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(
            f"{path}: payload has {payload} bytes, header promises {expected} for dims {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    pixels = _parse_idx(images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, LABELS_MAGIC, 1)
    if len(pixels) != len(labels):
        raise FormatError(
            f"{labels_path}: {len(labels)} labels but {images_path} holds {len(pixels)} images"
        )
    if labels.size and labels.max() >= NUM_CLASSES:
        raise ValidationError(f"{labels_path}: label {int(labels.max())} outside 0..9")
    return Dataset(name, split, pixels, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an uncompressed IDX file (1-D labels or 3-D images)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise UsageError("IDX writer only handles uint8 payloads")
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise UsageError(f"unsupported IDX rank {array.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def idx_paths(data_dir, split: str) -> tuple[Path, Path]:
    """Resolve ``<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    data_dir = Path(data_dir)
    prefix = SPLIT_PREFIX[split]
    found = []
    for kind in ("images-idx3", "labels-idx1"):
        base = data_dir / f"{prefix}-{kind}-ubyte"
        for candidate in (base, base.with_name(base.name + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(
                f"missing {base.name}[.gz] in {data_dir} "
                f"(expected {prefix}-images-idx3-ubyte and {prefix}-labels-idx1-ubyte)"
            )
    return found[0], found[1]


def load_dataset(name: str, split: str, data_dir=None, subset: int | None = None) -> Dataset:
    """Load one split, looking in ``<data_dir>/<name>/`` first and then ``<data_dir>``."""
    if name not in DATASETS:
        raise UsageError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if split not in SPLIT_PREFIX:
        raise UsageError(f"unknown split {split!r}")
    root = Path(data_dir) if data_dir is not None else default_data_dir()
    base = root / name if (root / name).is_dir() else root
    images_path, labels_path = idx_paths(base, split)
    return load_idx(images_path, labels_path, name, split).subset(subset)


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, onehot_labels)``; the last batch may be short."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed):
        yield dataset.images(idx), one_hot(dataset.labels[idx])
