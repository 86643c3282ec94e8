import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitkit.engine import Tensor
from bitkit.errors import ConfigError, DimensionError, StateError
from bitkit.optim import (
    DownstreamSchedule,
    OptimizerConfig,
    TrainState,
    UpstreamSchedule,
    WeightDecay,
    downstream_config,
    effective_lr,
    fraction_milestones,
    sgd_step,
    upstream_preset,
)


def scalar_params(value):
    return {"w": Tensor(np.array([value], dtype=np.float64), requires_grad=True)}


def plain(lr, momentum=0.0, wd=None):
    return OptimizerConfig(base_lr=lr, momentum=momentum, weight_decay=wd or WeightDecay())


class TestEffectiveLr:
    def test_upstream_post_warmup(self):
        cfg = upstream_preset("medium", steps_per_epoch=1000)
        assert effective_lr(cfg, 5000) == pytest.approx(0.48, abs=1e-12)
        assert effective_lr(cfg, 29_999) == pytest.approx(0.48, abs=1e-12)

    def test_warmup_midpoint(self):
        cfg = upstream_preset("medium", steps_per_epoch=1000)
        assert effective_lr(cfg, 2500) == pytest.approx(0.24, abs=1e-12)
        assert effective_lr(cfg, 0) == 0.0

    def test_warmup_is_linear(self):
        cfg = upstream_preset("medium", steps_per_epoch=1000)
        lrs = np.array([effective_lr(cfg, s) for s in range(0, 5001)])
        np.testing.assert_allclose(np.diff(lrs), 0.48 / 5000, rtol=1e-9)

    def test_downstream_two_decades(self):
        cfg = downstream_config(10_000)
        assert effective_lr(cfg, 6500) == pytest.approx(3e-5, rel=1e-12)

    def test_downstream_decade_steps(self):
        cfg = downstream_config(10_000)
        lrs = np.array([effective_lr(cfg, s) for s in range(10_000)])
        drops = np.flatnonzero(lrs[1:] < lrs[:-1]) + 1
        assert drops.tolist() == [3000, 6000, 9000]
        np.testing.assert_allclose(lrs[drops - 1] / lrs[drops], 10.0)

    def test_upstream_milestones_in_steps(self):
        assert upstream_preset("medium", 10).schedule.milestones() == (300, 600, 800)
        assert upstream_preset("large", 10).schedule.milestones() == (100, 230, 300, 370)
        assert upstream_preset("large", 10).schedule.total_steps == 400

    def test_scaling_off(self):
        cfg = OptimizerConfig(0.1, batch_size=1024, schedule=UpstreamSchedule((5,), 10, 10, 0, lr_scaling=False))
        assert effective_lr(cfg, 0) == 0.1

    def test_negative_step(self):
        with pytest.raises(ValueError):
            effective_lr(downstream_config(10), -1)

    @settings(max_examples=40, deadline=None)
    @given(warmup=st.integers(0, 200), spe=st.integers(1, 30), batch=st.sampled_from([64, 256, 4096]))
    def test_piecewise_monotone_and_final_lr(self, warmup, spe, batch):
        warmup = min(warmup, 3 * spe - 1)  # warmup finishes before the first milestone
        cfg = OptimizerConfig(0.03, batch_size=batch,
                              schedule=UpstreamSchedule((3, 6, 8), spe, 10, warmup, lr_scaling=True))
        lrs = np.array([effective_lr(cfg, s) for s in range(cfg.total_steps)])
        assert np.all(np.diff(lrs[: warmup + 1]) >= 0)
        assert np.all(np.diff(lrs[warmup:]) <= 0)
        peak = 0.03 * batch / 256
        assert lrs[-1] == pytest.approx(peak / 1000, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(total=st.integers(10, 50_000))
    def test_fraction_milestones(self, total):
        ms = fraction_milestones(total)
        assert ms == (total * 3 // 10, total * 6 // 10, total * 9 // 10)


class TestScheduleValidation:
    def test_non_increasing_milestones(self):
        with pytest.raises(ConfigError):
            UpstreamSchedule((30, 30), 10, 90)

    def test_fraction_range(self):
        with pytest.raises(ConfigError):
            DownstreamSchedule(100, (0.3, 1.0))

    def test_bad_momentum(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(0.1, momentum=1.0)

    def test_negative_decay(self):
        with pytest.raises(ConfigError):
            WeightDecay("toward_zero", -1e-4)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            upstream_preset("huge", 10)

    def test_dict_round_trip(self):
        for cfg in (upstream_preset("large", 7), downstream_config(500), plain(0.1)):
            assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg


class TestSgdStep:
    def test_plain_sgd(self):
        new, state = sgd_step(scalar_params(0.0), {"w": np.array([1.0])}, TrainState.create(scalar_params(0.0)),
                              plain(0.1))
        np.testing.assert_allclose(new["w"].data, [-0.1])
        assert state.step == 1

    def test_pure_decay_step(self):
        p = scalar_params(1.0)
        new, _ = sgd_step(p, {"w": np.array([0.0])}, TrainState.create(p), plain(1.0, wd=WeightDecay("toward_zero", 0.1)))
        np.testing.assert_allclose(new["w"].data, [0.9])

    def test_toward_init_fixed_point(self):
        p = scalar_params(0.37)
        state = TrainState.create(p, snapshot=True)
        new, _ = sgd_step(p, {"w": np.array([0.0])}, state, plain(0.5, 0.9, WeightDecay("toward_init", 0.3)))
        np.testing.assert_array_equal(new["w"].data, p["w"].data)

    def test_toward_init_needs_snapshot(self):
        p = scalar_params(1.0)
        with pytest.raises(StateError):
            sgd_step(p, {}, TrainState.create(p), plain(0.1, wd=WeightDecay("toward_init", 0.1)))

    def test_shape_mismatch(self):
        p = scalar_params(1.0)
        with pytest.raises(DimensionError):
            sgd_step(p, {"w": np.zeros(2)}, TrainState.create(p), plain(0.1))

    def test_momentum_matches_loop(self, rng):
        grads = rng.standard_normal((6, 3))
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        state = TrainState.create(p)
        cfg = plain(0.05, momentum=0.9)
        buf, ref = np.zeros(3), np.zeros(3)
        for g in grads:
            p, state = sgd_step(p, {"w": g}, state, cfg)
            buf = 0.9 * buf + g
            ref = ref - 0.05 * buf
        np.testing.assert_allclose(p["w"].data, ref, rtol=1e-12)
        np.testing.assert_allclose(state.momentum_buffers["w"], buf, rtol=1e-12)

    def test_update_linear_in_lr(self, rng):
        g = rng.standard_normal(4)
        p = {"w": Tensor(rng.standard_normal(4), requires_grad=True)}
        deltas = []
        for lr in (0.01, 0.02, 0.04):
            new, _ = sgd_step(p, {"w": g}, TrainState.create(p), plain(lr))
            deltas.append(new["w"].data - p["w"].data)
        np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-12)
        np.testing.assert_allclose(deltas[2], 4 * deltas[0], rtol=1e-12)

    def test_half_steps_differ_on_quadratic(self):
        # loss = w^2 / 2, grad = w
        p = scalar_params(1.0)
        full, _ = sgd_step(p, {"w": p["w"].data}, TrainState.create(p), plain(0.5))
        half, _ = sgd_step(p, {"w": p["w"].data}, TrainState.create(p), plain(0.25))
        half, _ = sgd_step(half, {"w": half["w"].data}, TrainState.create(half), plain(0.25))
        assert full["w"].item() == pytest.approx(0.5)
        assert half["w"].item() == pytest.approx(0.5625)

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(1e-3, 0.5), lr=st.floats(1e-3, 1.0), seed=st.integers(0, 1000))
    def test_toward_init_monotone(self, lam, lr, seed):
        rng = np.random.default_rng(seed)
        p = {"w": Tensor(rng.standard_normal(5), requires_grad=True)}
        state = TrainState.create(p, snapshot=True)
        p = {"w": Tensor(p["w"].data + rng.standard_normal(5), requires_grad=True)}
        cfg = plain(lr, 0.0, WeightDecay("toward_init", lam))
        dist = [np.linalg.norm(p["w"].data - state.init_snapshot["w"])]
        for _ in range(10):
            p, state = sgd_step(p, {}, state, cfg)
            dist.append(np.linalg.norm(p["w"].data - state.init_snapshot["w"]))
        assert np.all(np.diff(dist) <= 1e-15)

    def test_state_records_round_trip(self, rng):
        p = {"a": Tensor(rng.standard_normal((2, 2)).astype(np.float32), requires_grad=True)}
        state = TrainState.create(p, snapshot=True)
        p, state = sgd_step(p, {"a": np.ones((2, 2), np.float32)}, state, plain(0.1, 0.9))
        back = TrainState.from_records(state.to_records())
        assert back.step == 1
        np.testing.assert_array_equal(back.momentum_buffers["a"], state.momentum_buffers["a"])
        np.testing.assert_array_equal(back.init_snapshot["a"], state.init_snapshot["a"])
