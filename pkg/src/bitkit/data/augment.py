"""Resize / crop / flip preprocessing and MixUp."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class AugPolicy:
    resize_to: int
    crop_to: int
    random_flip: bool = True
    random_crop: bool = True
    eval_resize_to: Optional[int] = None

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValidationError(f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")
        if self.crop_to < 1:
            raise ValidationError("crop_to must be >= 1")
        if self.eval_resize_to is None:
            object.__setattr__(self, "eval_resize_to", self.crop_to)

    @classmethod
    def from_plan(cls, plan) -> "AugPolicy":
        return cls(plan.resize_to, plan.crop_to, plan.random_flip, plan.random_crop, plan.crop_to)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the bilinear weights of output pixel i (half-pixel centers)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(images: np.ndarray, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Resize (C, H, W) or (N, C, H, W) images; output stays within the input range."""
    out_w = out_h if out_w is None else out_w
    h, w = images.shape[-2:]
    if (h, w) == (out_h, out_w):
        return images.copy()
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    out = np.einsum("ih,...hw,jw->...ij", rh, images.astype(np.float64), rw, optimize=True)
    out = np.clip(out, images.min(), images.max())
    return out.astype(images.dtype)


def preprocess_train(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Resize to a square, crop (random or center), then optionally flip."""
    return preprocess_train_batch(image[None], policy, rng)[0]


def preprocess_train_batch(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    r, c = policy.resize_to, policy.crop_to
    resized = bilinear_resize(images, r)
    n = images.shape[0]
    out = np.empty(images.shape[:2] + (c, c), dtype=images.dtype)
    for i in range(n):
        if policy.random_crop and r > c:
            top, left = rng.integers(0, r - c + 1, size=2)
        else:
            top = left = (r - c) // 2
        patch = resized[i, :, top : top + c, left : left + c]
        if policy.random_flip and rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        out[i] = patch
    return out


def preprocess_eval(image: np.ndarray, policy: AugPolicy) -> np.ndarray:
    """Deterministic resize to ``eval_resize_to``; works on single images or batches."""
    return bilinear_resize(image, policy.eval_resize_to)


def sample_mixup_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValidationError(f"mixup alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mixup_batch(
    images: np.ndarray,
    onehot_labels: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
    perm: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix each example with a random partner using one λ ~ Beta(α, α) for the batch.

    Inputs and labels are mixed with the same λ.  ``lam`` and ``perm`` may be
    supplied to pin the draw.
    """
    if alpha <= 0:
        raise ValidationError(f"mixup alpha must be > 0, got {alpha}")
    n = images.shape[0]
    if n < 2:
        raise ValidationError("mixup needs a batch of at least 2")
    if onehot_labels.shape[0] != n:
        raise ValidationError("images and labels disagree on batch size")
    if lam is None:
        lam = sample_mixup_lambda(alpha, rng)
    if perm is None:
        perm = rng.permutation(n)
    lam = images.dtype.type(lam)
    x = lam * images + (1 - lam) * images[perm]
    y = lam * onehot_labels + (1 - lam) * onehot_labels[perm]
    return x, y
