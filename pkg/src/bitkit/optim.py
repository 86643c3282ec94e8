"""SGD with momentum, weight-decay modes, and warmup/step-decay learning-rate schedules."""

from __future__ import annotations

import dataclasses
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from .engine import Tensor
from .errors import ConfigError, DimensionError, StateError

DECAY_FACTOR = 10.0
REFERENCE_BATCH = 256
DOWNSTREAM_FRACTIONS = (0.3, 0.6, 0.9)


@dataclass(frozen=True)
class UpstreamSchedule:
    """Epoch-milestone decay with linear warmup (pre-training)."""

    milestone_epochs: tuple[int, ...]
    steps_per_epoch: int
    total_epochs: int
    warmup_steps: int = 5000
    lr_scaling: bool = True
    decay_factor: float = DECAY_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "milestone_epochs", tuple(int(m) for m in self.milestone_epochs))
        _check_increasing(self.milestone_epochs)
        if self.steps_per_epoch < 1 or self.total_epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("steps_per_epoch must be >= 1; epochs and warmup must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    def milestones(self) -> tuple[int, ...]:
        return tuple(m * self.steps_per_epoch for m in self.milestone_epochs)


@dataclass(frozen=True)
class DownstreamSchedule:
    """Decay at fixed fractions of the run; no warmup, no batch scaling."""

    total_steps: int
    fractions: tuple[float, ...] = DOWNSTREAM_FRACTIONS
    decay_factor: float = DECAY_FACTOR
    warmup_steps: int = 0
    lr_scaling: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if any(not 0.0 < f < 1.0 for f in self.fractions):
            raise ConfigError(f"fractions must lie in (0, 1), got {self.fractions}")
        _check_increasing(self.fractions)
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")

    def milestones(self) -> tuple[int, ...]:
        return fraction_milestones(self.total_steps, self.fractions)


Schedule = Union[UpstreamSchedule, DownstreamSchedule]


def fraction_milestones(total_steps: int, fractions=DOWNSTREAM_FRACTIONS) -> tuple[int, ...]:
    """floor(total * f), using the decimal value of f so 0.29 * 100 gives 29."""
    return tuple(math.floor(total_steps * Fraction(repr(float(f)))) for f in fractions)


def _check_increasing(values) -> None:
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"milestones must be strictly increasing, got {values}")


@dataclass(frozen=True)
class WeightDecay:
    mode: str = "none"  # none | toward_zero | toward_init
    strength: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "toward_zero", "toward_init"):
            raise ConfigError(f"unknown weight decay mode {self.mode!r}")
        if self.strength < 0:
            raise ConfigError("weight decay strength must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float
    momentum: float = 0.9
    batch_size: int = 256
    weight_decay: WeightDecay = field(default_factory=WeightDecay)
    schedule: Optional[Schedule] = None

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return 0 if self.schedule is None else self.schedule.total_steps

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.schedule is not None:
            d["schedule"]["kind"] = "upstream" if isinstance(self.schedule, UpstreamSchedule) else "downstream"
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerConfig":
        d = dict(d)
        wd = WeightDecay(**d.pop("weight_decay", {}) or {})
        sched = d.pop("schedule", None)
        if sched is not None:
            sched = dict(sched)
            kind = sched.pop("kind", "upstream" if "milestone_epochs" in sched else "downstream")
            sched = UpstreamSchedule(**sched) if kind == "upstream" else DownstreamSchedule(**sched)
        return cls(weight_decay=wd, schedule=sched, **d)


def upstream_preset(name: str, steps_per_epoch: int, batch_size: int = 4096, warmup_steps: int = 5000) -> OptimizerConfig:
    """Pre-training recipes: ``medium`` runs 90 epochs, ``large`` runs 40 (for much bigger corpora)."""
    if name == "medium":
        epochs, milestones = 90, (30, 60, 80)
    elif name == "large":
        epochs, milestones = 40, (10, 23, 30, 37)
    else:
        raise ConfigError(f"unknown upstream preset {name!r}")
    return OptimizerConfig(
        base_lr=0.03,
        momentum=0.9,
        batch_size=batch_size,
        weight_decay=WeightDecay("toward_zero", 1e-4),
        schedule=UpstreamSchedule(milestones, steps_per_epoch, epochs, warmup_steps, lr_scaling=True),
    )


def downstream_config(total_steps: int, base_lr: float = 0.003, batch_size: int = 512,
                      fractions=DOWNSTREAM_FRACTIONS, weight_decay: Optional[WeightDecay] = None) -> OptimizerConfig:
    return OptimizerConfig(
        base_lr=base_lr,
        momentum=0.9,
        batch_size=batch_size,
        weight_decay=weight_decay or WeightDecay(),
        schedule=DownstreamSchedule(total_steps, tuple(fractions)),
    )


def effective_lr(config: OptimizerConfig, step: int) -> float:
    """Learning rate used for the update taken at ``step`` (0-based)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    sched = config.schedule
    lr = config.base_lr
    if sched is None:
        return lr
    if sched.lr_scaling:
        lr *= config.batch_size / REFERENCE_BATCH
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        lr *= step / sched.warmup_steps
    passed = sum(1 for m in sched.milestones() if step >= m)
    return lr / sched.decay_factor**passed


@dataclass
class TrainState:
    step: int = 0
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    init_snapshot: Optional[dict[str, np.ndarray]] = None

    @classmethod
    def create(cls, params: Mapping[str, Tensor], snapshot: bool = False) -> "TrainState":
        buffers = {k: np.zeros_like(v.data) for k, v in params.items()}
        init = {k: v.data.copy() for k, v in params.items()} if snapshot else None
        return cls(0, buffers, init)

    def to_records(self) -> dict[str, np.ndarray]:
        rec = {"optim/step": np.asarray(self.step, dtype=np.float32)}
        for k, v in self.momentum_buffers.items():
            rec[f"optim/momentum/{k}"] = v
        for k, v in (self.init_snapshot or {}).items():
            rec[f"optim/init/{k}"] = v
        return rec

    @classmethod
    def from_records(cls, rec: Mapping[str, np.ndarray]) -> "TrainState":
        step = int(rec.get("optim/step", np.float32(0)))
        buffers = {k[len("optim/momentum/"):]: v for k, v in rec.items() if k.startswith("optim/momentum/")}
        init = {k[len("optim/init/"):]: v for k, v in rec.items() if k.startswith("optim/init/")}
        return cls(step, buffers, init or None)


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: TrainState,
    config: OptimizerConfig,
    lr: Optional[float] = None,
) -> tuple[dict[str, Tensor], TrainState]:
    """One momentum-SGD update; returns fresh params and state.

    buffer <- momentum * buffer + grad + decay_term;  param <- param - lr * buffer.
    Parameters without a gradient still receive the decay term.
    """
    if lr is None:
        lr = effective_lr(config, state.step)
    wd = config.weight_decay
    if wd.mode == "toward_init" and state.init_snapshot is None:
        raise StateError("toward_init weight decay needs an initial-weights snapshot")
    new_params: dict[str, Tensor] = {}
    new_buffers: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, param has {p.shape}")
        if wd.mode == "toward_zero" and wd.strength:
            g = g + wd.strength * p.data
        elif wd.mode == "toward_init" and wd.strength:
            g = g + wd.strength * (p.data - state.init_snapshot[name])
        buf = state.momentum_buffers.get(name)
        if buf is None:
            buf = g.astype(p.dtype, copy=True)
        else:
            if buf.shape != p.shape:
                raise DimensionError(f"momentum buffer for {name} has shape {buf.shape}, param has {p.shape}")
            buf = config.momentum * buf + g
        new_buffers[name] = buf.astype(p.dtype, copy=False)
        new_params[name] = Tensor((p.data - lr * buf).astype(p.dtype, copy=False), requires_grad=p.requires_grad)
    return new_params, TrainState(state.step + 1, new_buffers, state.init_snapshot)
