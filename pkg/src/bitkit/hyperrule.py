"""HyperRule: fine-tuning hyperparameters from dataset size and resolution."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

from .errors import ValidationError
from .optim import DOWNSTREAM_FRACTIONS, fraction_milestones

SMALL_LIMIT = 20_000
MEDIUM_LIMIT = 500_000
SMALL_IMAGE_AREA = 96 * 96

REGIME_STEPS = {"small": 500, "medium": 10_000, "large": 20_000}

FINETUNE_LR = 0.003
FINETUNE_MOMENTUM = 0.9
FINETUNE_BATCH = 512
MIXUP_ALPHA = 0.1


@dataclass(frozen=True)
class TaskSpec:
    num_train_examples: int
    native_height: int
    native_width: int
    num_classes: int = 2
    allow_flip: bool = True
    allow_crop: bool = True
    largest_model_mode: bool = False

    def __post_init__(self):
        if self.num_train_examples < 1:
            raise ValidationError("num_train_examples must be >= 1")
        if self.native_height < 1 or self.native_width < 1:
            raise ValidationError("image dimensions must be >= 1")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")


@dataclass(frozen=True)
class HyperRulePlan:
    size_regime: str
    total_steps: int
    decay_steps: tuple[int, ...]
    resize_to: int
    crop_to: int
    lr: float
    momentum: float
    batch_size: int
    mixup_alpha: Optional[float]
    random_flip: bool
    random_crop: bool

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decay_steps"] = list(self.decay_steps)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def size_regime(num_examples: int) -> str:
    if num_examples < SMALL_LIMIT:
        return "small"
    if num_examples < MEDIUM_LIMIT:
        return "medium"
    return "large"


def resolution(height: int, width: int, largest_model_mode: bool = False) -> tuple[int, int]:
    """(resize_to, crop_to) for a native image size."""
    if largest_model_mode:
        return 512, 480
    if height * width < SMALL_IMAGE_AREA:
        return 160, 128
    return 448, 384


def decay_steps(total_steps: int, fractions=DOWNSTREAM_FRACTIONS) -> tuple[int, ...]:
    return fraction_milestones(total_steps, fractions)


def plan(task: TaskSpec) -> HyperRulePlan:
    regime = size_regime(task.num_train_examples)
    total = REGIME_STEPS[regime]
    resize_to, crop_to = resolution(task.native_height, task.native_width, task.largest_model_mode)
    return HyperRulePlan(
        size_regime=regime,
        total_steps=total,
        decay_steps=decay_steps(total),
        resize_to=resize_to,
        crop_to=crop_to,
        lr=FINETUNE_LR,
        momentum=FINETUNE_MOMENTUM,
        batch_size=FINETUNE_BATCH,
        mixup_alpha=None if regime == "small" else MIXUP_ALPHA,
        random_flip=task.allow_flip,
        random_crop=task.allow_crop,
    )
