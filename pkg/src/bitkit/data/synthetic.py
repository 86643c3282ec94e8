"""Parametric colored-shape images for download-free experiments.

Each class is a shape drawn at a random pose and color over a
smooth random background, so class identity is carried by geometry alone.
Disjoint subsets of ``SHAPES`` give source/target tasks that share
low-level structure (edges and corners) but no labels.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset

SHAPES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "diamond",
    "hbar",
    "vbar",
    "xcross",
    "frame",
    "halfdisk",
    "twodots",
)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates relative to the shape center in units of its radius
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    if kind == "disk":
        return r <= 1.0
    if kind == "square":
        return (au <= 0.8) & (av <= 0.8)
    if kind == "triangle":
        return (v <= 0.8) & (v >= 2.0 * au - 1.0)
    if kind == "plus":
        return ((au <= 0.28) & (av <= 1.0)) | ((av <= 0.28) & (au <= 1.0))
    if kind == "ring":
        return (r <= 1.0) & (r >= 0.6)
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "hbar":
        return (au <= 1.0) & (av <= 0.3)
    if kind == "vbar":
        return (au <= 0.3) & (av <= 1.0)
    if kind == "xcross":
        return ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)) & (au <= 0.85) & (av <= 0.85)
    if kind == "frame":
        return (au <= 0.9) & (av <= 0.9) & ~((au <= 0.55) & (av <= 0.55))
    if kind == "halfdisk":
        return (r <= 1.0) & (v >= 0.0)
    if kind == "twodots":
        return (np.sqrt((u - 0.55) ** 2 + v * v) <= 0.42) | (np.sqrt((u + 0.55) ** 2 + v * v) <= 0.42)
    raise ValueError(f"unknown shape {kind!r}")


def smooth_field(rng: np.random.Generator, size: int, channels: int = 3, cells: int = 4) -> np.ndarray:
    """Low-frequency random image: a coarse random grid, bilinearly upsampled."""
    from .augment import bilinear_resize

    coarse = rng.random((channels, cells, cells))
    return bilinear_resize(coarse, size)


def render_shape(
    kind: str,
    rng: np.random.Generator,
    size: int = 32,
    channels: int = 3,
    background: float = 0.5,
) -> np.ndarray:
    """One (C, size, size) image of ``kind`` with a random pose and color."""
    radius = rng.uniform(0.22, 0.34) * size
    margin = radius * 1.05
    cy, cx = rng.uniform(margin, size - margin, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u, v = (xx - cx) / radius, (cy - yy) / radius
    mask = _shape_mask(kind, u, v)
    bg = background * smooth_field(rng, size, channels)
    color = rng.uniform(0.55, 1.0, size=channels)
    img = np.where(mask[None], color[:, None, None], bg)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_shapes(
    n: int,
    shapes: Sequence[str] = SHAPES[:4],
    size: int = 32,
    seed: int = 0,
    channels: int = 3,
    name: Optional[str] = None,
) -> Dataset:
    """Balanced dataset of ``n`` images over the given shape classes (label = position in ``shapes``)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(shapes)
    labels = rng.permutation(labels)
    images = np.stack([render_shape(shapes[k], rng, size, channels) for k in labels])
    return Dataset(images, labels, len(shapes), name or f"shapes{len(shapes)}")


def make_smooth_images(n: int, size: int = 32, seed: int = 0, channels: int = 3, cells: int = 6) -> np.ndarray:
    """Unlabeled diverse low-frequency images (decoys for near-duplicate audits)."""
    rng = np.random.default_rng(seed)
    return np.stack([smooth_field(rng, size, channels, cells) for _ in range(n)]).astype(np.float32)
