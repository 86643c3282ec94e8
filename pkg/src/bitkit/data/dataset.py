"""Dataset container with BITD serialization and sampling helpers."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..errors import FormatError, SamplingError, ValidationError

MAGIC = b"BITD"
VERSION = 1
HEADER = struct.Struct("<4s6I")

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] with sparse integer labels.

    ``ids`` tracks each example's index in the dataset it was originally
    loaded from, so subsets and splits stay traceable.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N x C x H x W, got shape {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise ValidationError("dataset must hold at least one example")
        if self.labels.shape != (n,):
            raise ValidationError(f"expected {n} labels, got shape {self.labels.shape}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise ValidationError(f"label {bad} outside [0, {self.num_classes})")
        if not np.isfinite(self.images).all() or self.images.min() < 0 or self.images.max() > 1:
            raise ValidationError("image values must be finite and within [0, 1]")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (n,):
                raise ValidationError("ids must have one entry per example")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name, self.ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def concat(a: Dataset, b: Dataset, name: Optional[str] = None) -> Dataset:
    if a.num_classes != b.num_classes or a.image_shape != b.image_shape:
        raise ValidationError("datasets differ in class count or image shape")
    return Dataset(
        np.concatenate([a.images, b.images]),
        np.concatenate([a.labels, b.labels]),
        a.num_classes,
        name or a.name,
        np.concatenate([a.ids, b.ids]),
    )


def save_dataset(dataset: Dataset, path: PathLike) -> None:
    n, c, h, w = dataset.images.shape
    if dataset.num_classes > 65536:
        raise ValidationError("BITD stores labels as u16; too many classes")
    header = HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.num_classes)
    body = np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    labels = dataset.labels.astype("<u2").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(header + body + labels)
    os.replace(tmp, path)


def decode_dataset(buf: bytes, name: str = "") -> Dataset:
    if len(buf) < HEADER.size:
        raise FormatError("truncated BITD header", len(buf))
    magic, version, n, c, h, w, num_classes = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported BITD version {version}", 4)
    if n < 1:
        raise FormatError("dataset declares zero examples", 8)
    pixels = n * c * h * w
    img_end = HEADER.size + 4 * pixels
    total = img_end + 2 * n
    if len(buf) < img_end:
        raise FormatError(f"truncated image payload: need {img_end} bytes, have {len(buf)}", len(buf))
    if len(buf) < total:
        raise FormatError(f"truncated label payload: need {total} bytes, have {len(buf)}", len(buf))
    if len(buf) > total:
        raise FormatError(f"{len(buf) - total} trailing bytes after labels", total)
    images = np.frombuffer(buf, dtype="<f4", count=pixels, offset=HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=img_end).astype(np.int64)
    if labels.max() >= num_classes:
        i = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[i]} of example {i} is not below num_classes={num_classes}", img_end + 2 * i)
    try:
        return Dataset(images.astype(np.float32), labels, int(num_classes), name)
    except ValidationError as exc:
        raise FormatError(str(exc), HEADER.size) from exc


def load_dataset(path: PathLike) -> Dataset:
    with open(path, "rb") as f:
        buf = f.read()
    return decode_dataset(buf, name=os.path.splitext(os.path.basename(os.fspath(path)))[0])


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def split_by_hash(dataset: Dataset, holdout: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic (train, held-out) split keyed on each example's id."""
    u = (_mix64(dataset.ids) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    held = u < holdout
    if held.all() or not held.any():
        raise SamplingError(f"hash split of {len(dataset)} examples left one side empty")
    return dataset.subset(np.flatnonzero(~held)), dataset.subset(np.flatnonzero(held))


def fewshot_subsample(dataset: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Balanced random subsample: exactly ``n_per_class`` examples of every class."""
    if n_per_class < 1:
        raise SamplingError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == cls)
        if pool.size < n_per_class:
            raise SamplingError(f"class {cls} has only {pool.size} examples, {n_per_class} requested")
        chosen.append(rng.choice(pool, size=n_per_class, replace=False))
    idx = rng.permutation(np.concatenate(chosen))
    return dataset.subset(idx, name=f"{dataset.name}-{n_per_class}shot")
