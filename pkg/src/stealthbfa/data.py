"""IDX (MNIST-format) reading/writing and synthetic datasets.

IDX layout: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
count byte, then one big-endian uint32 per dimension, then the payload in
row-major order. Files ending in ``.gz`` are transparently (de)compressed.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
UBYTE = 0x08


class IdxParseError(ValueError):
    """Malformed IDX content; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    """Inconsistent dataset contents."""


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: Tuple[int, ...]

    @property
    def type_code(self) -> int:
        return (self.magic >> 8) & 0xFF

    @property
    def ndim(self) -> int:
        return self.magic & 0xFF

    @property
    def header_size(self) -> int:
        return 4 + 4 * len(self.dims)

    @property
    def payload_size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 1


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise DatasetError("labels must be non-negative")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx, split: str = None) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], split or self.split)

    def head(self, count: int, split: str = None) -> "LabeledDataset":
        return self.subset(slice(0, count), split)

    def check_classes(self, class_count: int) -> None:
        if self.labels.size and self.labels.max() >= class_count:
            raise DatasetError(f"label {int(self.labels.max())} >= class count {class_count}")


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int = None) -> Tuple[IdxHeader, np.ndarray]:
    """Parse an unsigned-byte IDX buffer; rejects trailing or missing bytes."""
    if len(raw) < 4:
        raise IdxParseError(f"file too short for magic: {len(raw)} bytes", len(raw))
    magic = struct.unpack_from(">I", raw, 0)[0]
    if raw[0] != 0 or raw[1] != 0:
        raise IdxParseError(f"bad magic 0x{magic:08x}: first two bytes must be zero", 0)
    if raw[2] != UBYTE:
        raise IdxParseError(f"unsupported element type 0x{raw[2]:02x} (only 0x08 unsigned byte)", 2)
    if expected_magic is not None and magic != expected_magic:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = raw[3]
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxParseError(f"truncated header: expected {need} bytes, got {len(raw)}", len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    header = IdxHeader(magic, tuple(int(d) for d in dims))
    total = header.header_size + header.payload_size
    if len(raw) != total:
        what = "truncated payload" if len(raw) < total else "trailing bytes after payload"
        raise IdxParseError(
            f"{what}: expected {header.payload_size} payload bytes, got {len(raw) - header.header_size}",
            min(len(raw), total),
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header.header_size).reshape(header.dims)
    return header, data


def load_idx_images(path) -> np.ndarray:
    """Images as float64 ``count x 1 x rows x cols`` with values byte/255."""
    raw = _read_bytes(path)
    header, data = parse_idx(raw, IMAGES_MAGIC)
    if len(header.dims) != 3:
        raise IdxParseError(f"image file must have 3 dimensions, got {len(header.dims)}", 3)
    return (data.astype(np.float64) / 255.0)[:, None, :, :]


def load_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    header, data = parse_idx(raw, LABELS_MAGIC)
    if len(header.dims) != 1:
        raise IdxParseError(f"label file must have 1 dimension, got {len(header.dims)}", 3)
    return data.astype(np.int64)


def load_idx_dataset(images_path, labels_path, split: str = "train", class_count: int = None) -> LabeledDataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"count mismatch: {images_path} has {images.shape[0]} images, {labels_path} has {labels.shape[0]} labels"
        )
    ds = LabeledDataset(images, labels, split)
    if class_count is not None:
        ds.check_classes(class_count)
    return ds


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX writer only supports uint8 arrays, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("too many dimensions for IDX")
    header = bytes([0, 0, UBYTE, array.ndim]) + struct.pack(">" + "I" * array.ndim, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    path = Path(path)
    payload = encode_idx(array)
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix == ".gz":
        # mtime=0 keeps the output byte-identical across runs
        with open(tmp, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
            fh.write(payload)
    else:
        tmp.write_bytes(payload)
    os.replace(tmp, path)


def images_to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the byte/255 mapping for images that came from bytes."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[:, 0]
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_idx_dataset(images_path, labels_path, ds: LabeledDataset) -> None:
    write_idx(images_path, images_to_bytes(ds.inputs))
    write_idx(labels_path, ds.labels.astype(np.uint8))


def synthetic_blobs(
    classes: int,
    per_class: int,
    feature_dim: int,
    spread: float,
    seed: int = 0,
    split: str = "train",
) -> LabeledDataset:
    """Gaussian clusters around seeded centers in [0.2, 0.8]^d, clamped to [0, 1]."""
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, feature_dim))
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, feature_dim)) * spread
    inputs = np.clip(centers[labels] + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return LabeledDataset(inputs[order], labels[order], split)


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Deterministic per-class split into (train, test)."""
    rng = np.random.default_rng(seed)
    train_idx: List[np.ndarray] = []
    test_idx: List[np.ndarray] = []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(idx.size * test_fraction))
        test_idx.append(idx[:cut])
        train_idx.append(idx[cut:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    tr = tr[rng.permutation(tr.size)]
    te = te[rng.permutation(te.size)]
    return ds.subset(tr, "train"), ds.subset(te, "test")
