import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitkit.errors import ValidationError
from bitkit.hyperrule import TaskSpec, plan, resolution, size_regime


class TestPlanExamples:
    def test_small_low_res(self):
        p = plan(TaskSpec(1000, 32, 32))
        assert (p.size_regime, p.total_steps, p.decay_steps) == ("small", 500, (150, 300, 450))
        assert (p.resize_to, p.crop_to, p.mixup_alpha) == (160, 128, None)

    def test_large_high_res(self):
        p = plan(TaskSpec(1_281_167, 224, 224))
        assert (p.size_regime, p.total_steps, p.decay_steps) == ("large", 20_000, (6000, 12_000, 18_000))
        assert (p.resize_to, p.crop_to, p.mixup_alpha) == (448, 384, 0.1)

    def test_boundary_20k_is_medium(self):
        p = plan(TaskSpec(20_000, 224, 224))
        assert p.size_regime == "medium" and p.total_steps == 10_000 and p.mixup_alpha == 0.1

    def test_boundary_500k_is_large(self):
        assert plan(TaskSpec(500_000, 64, 64)).size_regime == "large"
        assert plan(TaskSpec(499_999, 64, 64)).size_regime == "medium"

    def test_area_threshold(self):
        assert resolution(95, 97) == (160, 128)  # 9215 pixels
        assert resolution(96, 96) == (448, 384)
        assert resolution(48, 200) == (448, 384)  # min side < 96 but area >= 9216

    def test_xl_mode(self):
        assert plan(TaskSpec(100, 16, 16, largest_model_mode=True)).resize_to == 512
        assert plan(TaskSpec(100, 16, 16, largest_model_mode=True)).crop_to == 480

    def test_flags_pass_through(self):
        p = plan(TaskSpec(100, 32, 32, allow_flip=False, allow_crop=False))
        assert not p.random_flip and not p.random_crop

    def test_json_key_order(self):
        d = json.loads(plan(TaskSpec(1000, 32, 32)).to_json())
        assert list(d)[:3] == ["size_regime", "total_steps", "decay_steps"]

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            TaskSpec(0, 32, 32)
        with pytest.raises(ValidationError):
            TaskSpec(10, 0, 32)


specs = st.builds(
    TaskSpec,
    num_train_examples=st.integers(1, 3_000_000),
    native_height=st.integers(1, 1024),
    native_width=st.integers(1, 1024),
    num_classes=st.integers(1, 1000),
    allow_flip=st.booleans(),
    allow_crop=st.booleans(),
    largest_model_mode=st.booleans(),
)


class TestPlanProperties:
    @settings(max_examples=200)
    @given(task=specs)
    def test_invariants(self, task):
        p = plan(task)
        assert p == plan(task)
        assert p.crop_to < p.resize_to
        assert list(p.decay_steps) == sorted(set(p.decay_steps)) and p.decay_steps[-1] < p.total_steps
        assert (p.lr, p.momentum, p.batch_size) == (0.003, 0.9, 512)
        assert (p.mixup_alpha is None) == (p.size_regime == "small")

    @settings(max_examples=200)
    @given(a=st.integers(1, 3_000_000), b=st.integers(1, 3_000_000))
    def test_steps_monotone_in_examples(self, a, b):
        lo, hi = sorted((a, b))
        assert plan(TaskSpec(lo, 64, 64)).total_steps <= plan(TaskSpec(hi, 64, 64)).total_steps

    @given(n=st.integers(1, 3_000_000))
    def test_regime_thresholds(self, n):
        expected = "small" if n < 20_000 else "medium" if n < 500_000 else "large"
        assert size_regime(n) == expected
