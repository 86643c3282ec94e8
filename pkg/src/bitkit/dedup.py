"""Near-duplicate detection between an upstream corpus and a test set.

Two signals are combined: a 64-bit difference hash over a 9x8 grayscale
thumbnail, indexed by exact-match bands so lookups stay near-linear, and an
optional cosine similarity between unit-norm backbone embeddings.  A pair is
reported when either signal clears its threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError, ValidationError

HASH_BITS = 64
DEFAULT_HAMMING = 6
DEFAULT_COSINE = 0.95

Embedder = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Fingerprint:
    dhash: int
    embed: Optional[np.ndarray] = None
    low_entropy: bool = False


@dataclass(frozen=True)
class DuplicatePair:
    upstream_idx: int
    test_idx: int
    hamming: int
    cosine: Optional[float]

    def to_record(self) -> dict:
        return {"upstream_idx": self.upstream_idx, "test_idx": self.test_idx, "hamming": self.hamming,
                "cosine": self.cosine}


def grayscale(images: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W) luma; single-channel images pass through."""
    if images.shape[1] == 3:
        return np.tensordot(np.array([0.299, 0.587, 0.114]), images.astype(np.float64), axes=([0], [1]))
    return images.astype(np.float64).mean(axis=1)


def _box_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging weights: output cell i covers [i, i+1) * n_in / n_out of the input."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def thumbnails(images: np.ndarray, width: int = 9, height: int = 8) -> np.ndarray:
    gray = grayscale(images)
    rh = _box_matrix(gray.shape[1], height)
    rw = _box_matrix(gray.shape[2], width)
    return np.einsum("ih,nhw,jw->nij", rh, gray, rw)


_BIT_WEIGHTS = np.uint64(1) << np.arange(HASH_BITS - 1, -1, -1, dtype=np.uint64)


def dhash_batch(images: np.ndarray, tie_tol: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """(hashes as uint64, low-entropy flags) for a batch of (N, C, H, W) images.

    Bit r*8+c (most significant first) is set when thumbnail pixel (r, c) is
    brighter than its right neighbour.  An image whose thumbnail has no
    horizontal gradient above ``tie_tol`` hashes to 0 and is flagged.
    """
    if images.ndim != 4:
        raise DimensionError(f"expected N x C x H x W images, got {images.shape}")
    if images.shape[2] < 9 or images.shape[3] < 9:
        raise DimensionError(f"images must be at least 9x9, got {images.shape[2:]}")
    thumb = thumbnails(images)
    diff = thumb[:, :, :-1] - thumb[:, :, 1:]
    bits = (diff > tie_tol).reshape(len(images), HASH_BITS)
    hashes = (bits.astype(np.uint64) * _BIT_WEIGHTS).sum(axis=1, dtype=np.uint64)
    low = np.abs(diff).reshape(len(images), -1).max(axis=1) <= tie_tol
    hashes[low] = 0
    return hashes, low


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def fingerprint_batch(images: np.ndarray, embedder: Optional[Embedder] = None) -> list[Fingerprint]:
    hashes, low = dhash_batch(images)
    embeds = unit_rows(embedder(images)) if embedder is not None else [None] * len(images)
    return [Fingerprint(int(h), e, bool(f)) for h, e, f in zip(hashes, embeds, low)]


def fingerprint(image: np.ndarray, embedder: Optional[Embedder] = None) -> Fingerprint:
    """Fingerprint of one (C, H, W) image."""
    return fingerprint_batch(np.asarray(image)[None], embedder)[0]


def backbone_embedder(model, params, size: Optional[int] = None, batch_size: int = 250) -> Embedder:
    """Pooled features of a frozen model as the embedding signal."""
    from .data import bilinear_resize
    from .engine import Tensor, no_grad

    def embed(images: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = images[start : start + batch_size]
                if size is not None:
                    x = bilinear_resize(x, size)
                out.append(model.features(params, Tensor(x.astype(np.float32))).data)
        return np.concatenate(out)

    return embed


def popcount64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    if hasattr(np, "bitwise_count"):
        return np.bitwise_count(x).astype(np.int64)
    return np.unpackbits(x.view(np.uint8).reshape(-1, 8), axis=1).sum(axis=1).reshape(x.shape)


def _bands(threshold: int) -> list[tuple[int, int]]:
    # pigeonhole: t differing bits leave at least one of t+1 bands untouched
    m = min(threshold + 1, HASH_BITS)
    edges = np.linspace(0, HASH_BITS, m + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _band_values(hashes: np.ndarray, lo: int, hi: int) -> np.ndarray:
    shift = np.uint64(HASH_BITS - hi)
    mask = np.uint64((1 << (hi - lo)) - 1)
    return (hashes >> shift) & mask


def hash_candidates(up: np.ndarray, test: np.ndarray, threshold: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (upstream, test, distance) with Hamming distance <= threshold."""
    if threshold >= HASH_BITS // 2:
        ui, ti = np.meshgrid(np.arange(up.size), np.arange(test.size), indexing="ij")
        ui, ti = ui.ravel(), ti.ravel()
    else:
        found_u, found_t = [], []
        for lo, hi in _bands(threshold):
            ub, tb = _band_values(up, lo, hi), _band_values(test, lo, hi)
            order = np.argsort(ub, kind="stable")
            sorted_ub = ub[order]
            left = np.searchsorted(sorted_ub, tb, side="left")
            right = np.searchsorted(sorted_ub, tb, side="right")
            counts = right - left
            if not counts.any():
                continue
            t_rep = np.repeat(np.arange(test.size), counts)
            starts = np.repeat(left, counts)
            offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            found_u.append(order[starts + offsets])
            found_t.append(t_rep)
        if not found_u:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty, empty
        pairs = np.unique(np.stack([np.concatenate(found_u), np.concatenate(found_t)], axis=1), axis=0)
        ui, ti = pairs[:, 0], pairs[:, 1]
    dist = popcount64(up[ui] ^ test[ti])
    keep = dist <= threshold
    return ui[keep].astype(np.int64), ti[keep].astype(np.int64), dist[keep]


def find_near_duplicates(
    upstream: Sequence[Fingerprint],
    test: Sequence[Fingerprint],
    hamming_thresh: int = DEFAULT_HAMMING,
    cosine_thresh: float = DEFAULT_COSINE,
    match_low_entropy: bool = False,
    chunk: int = 2048,
) -> list[DuplicatePair]:
    """Pairs whose dhash distance is within ``hamming_thresh`` or whose embeddings have
    cosine >= ``cosine_thresh`` (only when both sides carry embeddings).

    Low-entropy (flat) images hash to 0 and are left out of the hash signal
    unless ``match_low_entropy`` is set.  Output is sorted by (test, upstream).
    """
    if not 0 <= hamming_thresh <= HASH_BITS:
        raise UsageError(f"hamming threshold must be in [0, {HASH_BITS}], got {hamming_thresh}")
    if not -1.0 <= cosine_thresh <= 1.0:
        raise UsageError(f"cosine threshold must be in [-1, 1], got {cosine_thresh}")
    if not upstream or not test:
        return []
    up_h = np.array([f.dhash for f in upstream], dtype=np.uint64)
    te_h = np.array([f.dhash for f in test], dtype=np.uint64)
    up_ok = np.array([match_low_entropy or not f.low_entropy for f in upstream])
    te_ok = np.array([match_low_entropy or not f.low_entropy for f in test])
    up_sel, te_sel = np.flatnonzero(up_ok), np.flatnonzero(te_ok)

    found: dict[tuple[int, int], int] = {}
    if up_sel.size and te_sel.size:
        ui, ti, dist = hash_candidates(up_h[up_sel], te_h[te_sel], hamming_thresh)
        for u, t, d in zip(up_sel[ui], te_sel[ti], dist):
            found[(int(u), int(t))] = int(d)

    has_embed = all(f.embed is not None for f in upstream) and all(f.embed is not None for f in test)
    cos: dict[tuple[int, int], float] = {}
    if has_embed:
        up_e = np.stack([f.embed for f in upstream])
        te_e = np.stack([f.embed for f in test])
        for start in range(0, len(test), chunk):
            sims = te_e[start : start + chunk] @ up_e.T
            ts, us = np.nonzero(sims >= cosine_thresh)
            for t, u in zip(ts, us):
                cos[(int(u), int(start + t))] = float(sims[t, u])
        for key in found:
            if key not in cos:
                cos[key] = float(up_e[key[0]] @ te_e[key[1]])

    pairs = []
    for u, t in sorted(set(found) | set(k for k, v in cos.items() if v >= cosine_thresh), key=lambda k: (k[1], k[0])):
        d = found.get((u, t))
        if d is None:
            d = int(popcount64(np.array([up_h[u] ^ te_h[t]]))[0])
        pairs.append(DuplicatePair(u, t, d, cos.get((u, t))))
    return pairs


@dataclass(frozen=True)
class DedupReport:
    full_acc: float
    dedup_acc: Optional[float]
    dup_count: int
    n_total: int
    empty: bool

    def to_record(self) -> dict:
        return {"kind": "dedup_report", "full_acc": self.full_acc,
                "dedup_acc": "EMPTY" if self.empty else self.dedup_acc,
                "dup_count": self.dup_count, "n_total": self.n_total}


def report_from_predictions(preds: np.ndarray, labels: np.ndarray, flagged: Sequence[int]) -> DedupReport:
    """Accuracy on everything and on the items left after removing ``flagged``."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    n = labels.size
    if n == 0 or preds.shape != labels.shape:
        raise ValidationError("predictions and labels must be non-empty and aligned")
    flagged = np.unique(np.asarray(flagged, dtype=np.int64))
    if flagged.size and (flagged.min() < 0 or flagged.max() >= n):
        raise ValidationError(f"flagged index outside [0, {n})")
    correct = preds == labels
    correct_full = int(correct.sum())
    dup_count = int(flagged.size)
    remaining = n - dup_count
    if remaining == 0:
        return DedupReport(correct_full / n, None, dup_count, n, True)
    correct_flagged = int(correct[flagged].sum())
    return DedupReport(correct_full / n, (correct_full - correct_flagged) / remaining, dup_count, n, False)


def dedup_report(test_dataset, pairs: Sequence[DuplicatePair], model, params, policy=None) -> DedupReport:
    """Evaluate ``model`` on the full test set and on the set minus flagged items."""
    from .metrics import predictions
    from .transfer import evaluate

    _, _, logits = evaluate(model, params, test_dataset, policy)
    return report_from_predictions(predictions(logits), test_dataset.labels, [p.test_idx for p in pairs])


def score_pairs(pairs: Sequence[DuplicatePair], truth: set[tuple[int, int]]) -> tuple[float, float]:
    """(recall, precision) of reported pairs against the planted (upstream, test) set."""
    got = {(p.upstream_idx, p.test_idx) for p in pairs}
    hits = len(got & truth)
    recall = hits / len(truth) if truth else 1.0
    precision = hits / len(got) if got else 1.0
    return recall, precision


def perturb(image: np.ndarray, rng: np.random.Generator, max_shift: int = 1, max_brightness: float = 0.05) -> np.ndarray:
    """Crop-jitter (shift then resize back) plus a uniform brightness offset."""
    from .data import bilinear_resize

    c, h, w = image.shape
    top, left = rng.integers(0, max_shift + 1, size=2)
    bottom, right = rng.integers(0, max_shift + 1, size=2)
    crop = image[:, top : h - bottom, left : w - right]
    out = bilinear_resize(crop, h, w) + rng.uniform(-max_brightness, max_brightness)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class PlantedBenchmark:
    upstream: np.ndarray
    test: np.ndarray
    truth: set


def make_planted_benchmark(n_upstream: int = 10_000, n_planted: int = 200, n_test_decoys: int = 800,
                           size: int = 32, seed: int = 0) -> PlantedBenchmark:
    """Smooth random decoys upstream; the test set mixes fresh decoys with perturbed upstream copies."""
    from .data import make_smooth_images

    rng = np.random.default_rng(seed)
    upstream = make_smooth_images(n_upstream, size, seed=seed)
    decoys = make_smooth_images(n_test_decoys, size, seed=seed + 1_000_003)
    sources = rng.choice(n_upstream, size=n_planted, replace=False)
    planted = np.stack([perturb(upstream[i], rng) for i in sources])
    test = np.concatenate([decoys, planted])
    order = rng.permutation(len(test))
    test = test[order]
    position = np.empty_like(order)
    position[order] = np.arange(len(order))
    truth = {(int(src), int(position[n_test_decoys + k])) for k, src in enumerate(sources)}
    return PlantedBenchmark(upstream, test, truth)
