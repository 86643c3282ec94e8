from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitkit.data import Dataset
from bitkit.dedup import (
    DuplicatePair,
    dedup_report,
    dhash_batch,
    find_near_duplicates,
    fingerprint,
    fingerprint_batch,
    hash_candidates,
    popcount64,
    report_from_predictions,
    score_pairs,
)
from bitkit.errors import DimensionError, UsageError, ValidationError
from bitkit.layers import ModelConfig, ResNetV2


def loop_dhash(image: np.ndarray) -> int:
    """Reference for images whose sides are multiples of 8 (rows) and 9 (columns)."""
    gray = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    bh, bw = gray.shape[0] // 8, gray.shape[1] // 9
    thumb = [[gray[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw].mean() for c in range(9)] for r in range(8)]
    value = 0
    for r in range(8):
        for c in range(8):
            value = (value << 1) | int(thumb[r][c] - thumb[r][c + 1] > 1e-7)
    return value


def random_embedder(dim=16, seed=0):
    """Centered random projection; unrelated images land near-orthogonal."""
    cache = {}

    def embed(images):
        flat = images.reshape(len(images), -1) - 0.5
        if flat.shape[1] not in cache:
            cache[flat.shape[1]] = np.random.default_rng(seed).standard_normal((flat.shape[1], dim))
        return flat @ cache[flat.shape[1]]

    return embed


class TestFingerprint:
    def test_matches_loop_reference(self, rng):
        imgs = rng.random((5, 3, 32, 36))
        hashes, _ = dhash_batch(imgs)
        assert [int(h) for h in hashes] == [loop_dhash(im) for im in imgs]

    def test_identical_images(self, rng):
        img = rng.random((3, 20, 20))
        assert fingerprint(img) == fingerprint(img.copy())

    def test_brightness_shift_invariant(self, rng):
        img = rng.random((3, 32, 32)) * 0.9
        assert fingerprint(img).dhash == fingerprint(img + 0.01).dhash

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), gain=st.floats(0.2, 1.0), offset=st.floats(0.0, 0.1))
    def test_affine_brightness_invariant(self, seed, gain, offset):
        img = np.random.default_rng(seed).random((3, 16, 18)) * 0.9
        assert fingerprint(img).dhash == fingerprint(img * gain + offset).dhash

    def test_random_pairs_differ_by_half(self, rng):
        a, _ = dhash_batch(rng.random((1000, 3, 16, 18)))
        b, _ = dhash_batch(rng.random((1000, 3, 16, 18)))
        d = popcount64(a ^ b)
        assert abs(d.mean() - 32) < 1.0

    def test_constant_image_flagged(self):
        fp = fingerprint(np.full((3, 12, 12), 0.4))
        assert fp.dhash == 0 and fp.low_entropy

    def test_too_small(self):
        with pytest.raises(DimensionError):
            fingerprint(np.zeros((3, 8, 12)))

    def test_embed_unit_norm(self, rng):
        fps = fingerprint_batch(rng.random((6, 3, 12, 12)), random_embedder())
        for fp in fps:
            assert abs(np.linalg.norm(fp.embed) - 1) < 1e-6

    def test_popcount(self):
        x = np.array([0, 1, 0xFF, 2**64 - 1], dtype=np.uint64)
        assert popcount64(x).tolist() == [0, 1, 8, 64]


class TestIndex:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), t=st.integers(0, 40))
    def test_bands_match_brute_force(self, seed, t):
        rng = np.random.default_rng(seed)
        up = rng.integers(0, 2**63, size=40, dtype=np.uint64)
        # plant near copies so small thresholds have something to find
        flips = np.uint64(1) << rng.integers(0, 64, size=(40, 3)).astype(np.uint64)
        near = up ^ flips[:, 0] ^ flips[:, 1]
        test = np.concatenate([near[:20], rng.integers(0, 2**63, size=20, dtype=np.uint64)])
        ui, ti, dist = hash_candidates(up, test, t)
        got = set(zip(ui.tolist(), ti.tolist()))
        full = popcount64(up[:, None] ^ test[None, :])
        expected = set(zip(*np.nonzero(full <= t)))
        assert got == {(int(a), int(b)) for a, b in expected}
        assert np.all(dist == full[ui, ti])


class TestFindNearDuplicates:
    def test_exact_duplicates_found(self, rng):
        up = rng.random((50, 3, 16, 16))
        idx = rng.choice(50, 10, replace=False)
        test = np.concatenate([rng.random((30, 3, 16, 16)), up[idx]])
        pairs = find_near_duplicates(fingerprint_batch(up), fingerprint_batch(test))
        truth = {(int(u), 30 + k) for k, u in enumerate(idx)}
        recall, _ = score_pairs(pairs, truth)
        assert recall == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_disjoint_random_corpora(self, seed):
        rng = np.random.default_rng(seed)
        emb = random_embedder()
        up = fingerprint_batch(rng.random((200, 3, 16, 16)), emb)
        test = fingerprint_batch(rng.random((100, 3, 16, 16)), emb)
        assert find_near_duplicates(up, test, 2, 0.99) == []

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 1000), h1=st.integers(0, 30), h2=st.integers(0, 30),
           c1=st.floats(-1, 1), c2=st.floats(-1, 1))
    def test_monotone_in_thresholds(self, seed, h1, h2, c1, c2):
        rng = np.random.default_rng(seed)
        emb = random_embedder(4, seed)
        up = fingerprint_batch(rng.random((15, 3, 12, 12)), emb)
        test = fingerprint_batch(rng.random((10, 3, 12, 12)), emb)
        tight = {(p.upstream_idx, p.test_idx) for p in find_near_duplicates(up, test, min(h1, h2), max(c1, c2))}
        loose = {(p.upstream_idx, p.test_idx) for p in find_near_duplicates(up, test, max(h1, h2), min(c1, c2))}
        assert tight <= loose

    def test_embedding_signal_alone(self, rng):
        emb = random_embedder()
        img = rng.random((1, 3, 16, 16))
        mirrored = img[:, :, :, ::-1].copy()
        up, test = fingerprint_batch(img, emb), fingerprint_batch(mirrored, emb)
        pairs = find_near_duplicates(up, test, 0, -1.0)
        assert len(pairs) == 1 and pairs[0].cosine is not None

    def test_low_entropy_excluded_by_default(self):
        flat = fingerprint_batch(np.full((2, 3, 12, 12), 0.3))
        assert find_near_duplicates(flat[:1], flat[1:]) == []
        assert len(find_near_duplicates(flat[:1], flat[1:], match_low_entropy=True)) == 1

    def test_threshold_validation(self, rng):
        fps = fingerprint_batch(rng.random((2, 3, 12, 12)))
        with pytest.raises(UsageError):
            find_near_duplicates(fps, fps, 65)
        with pytest.raises(UsageError):
            find_near_duplicates(fps, fps, 3, 1.5)


class TestReport:
    def test_zero_pairs(self):
        r = report_from_predictions(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]), [])
        assert r.full_acc == r.dedup_acc == 0.75 and r.dup_count == 0

    def test_flag_misclassified_raises_accuracy(self):
        r = report_from_predictions(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]), [2])
        assert r.dedup_acc == 1.0 > r.full_acc

    def test_all_flagged(self):
        r = report_from_predictions(np.array([0, 1]), np.array([0, 0]), [0, 1, 1])
        assert r.empty and r.dedup_acc is None and r.to_record()["dedup_acc"] == "EMPTY"

    def test_bad_index(self):
        with pytest.raises(ValidationError):
            report_from_predictions(np.array([0]), np.array([0]), [1])

    @settings(max_examples=100)
    @given(data=st.data(), n=st.integers(1, 60))
    def test_exact_arithmetic(self, data, n):
        preds = np.array(data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
        labels = np.array(data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
        flagged = data.draw(st.lists(st.integers(0, n - 1), max_size=n))
        r = report_from_predictions(preds, labels, flagged)
        dup = len(set(flagged))
        correct = int((preds == labels).sum())
        correct_flagged = int(sum(preds[i] == labels[i] for i in set(flagged)))
        assert r.dup_count == dup
        assert Fraction(r.full_acc).limit_denominator(10_000) == Fraction(correct, n)
        if dup < n:
            assert r.dedup_acc == (correct - correct_flagged) / (n - dup)
        else:
            assert r.empty

    def test_with_model(self, rng):
        cfg = ModelConfig(depth_preset="toy-8", base_width=8, num_groups=4, num_classes=3)
        model = ResNetV2(cfg)
        params = model.init_params(0)
        ds = Dataset(rng.random((9, 3, 12, 12)), np.arange(9) % 3, 3)
        pairs = [DuplicatePair(0, 4, 0, None), DuplicatePair(3, 4, 1, None)]
        r = dedup_report(ds, pairs, model, params)
        # zero head predicts class 0 everywhere
        assert r.full_acc == pytest.approx(3 / 9) and r.dup_count == 1
        assert r.dedup_acc == pytest.approx(3 / 8)
