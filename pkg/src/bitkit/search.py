"""Random hyperparameter search over fine-tuning settings."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .data import AugPolicy, Dataset, concat
from .errors import BitkitError, SamplingError, ValidationError
from .layers import ModelConfig, ResNetV2
from .transfer import TrainResult, evaluate, finetune_with

logger = logging.getLogger(__name__)

# crop-to-resize ratio of the HyperRule pairs (128/160)
RESIZE_RATIO = 1.25


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-4, 1e-1)
    steps: tuple[int, ...] = (500, 1000, 2000, 4000, 8000, 16000)
    dropout_range: tuple[float, float] = (0.0, 0.7)
    wd_to_init_range: tuple[float, float] = (1e-6, 1e-1)
    mixup_alphas: tuple[Optional[float], ...] = (None, 0.05, 0.1, 0.2, 0.4)
    resolutions: tuple[int, ...] = (64, 128, 192, 256, 320, 384)

    def __post_init__(self):
        for name in ("lr_range", "wd_to_init_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must be a positive interval, got {(lo, hi)}")
        lo, hi = self.dropout_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValidationError(f"dropout_range must lie in [0, 1), got {(lo, hi)}")
        if not self.steps or not self.mixup_alphas or not self.resolutions:
            raise ValidationError("discrete choices must be non-empty")

    @classmethod
    def desk(cls, steps=(10, 20, 40, 80, 160, 320), resolutions=(12, 16, 20, 24, 28, 32)) -> "SearchSpace":
        """Same distributions with step counts and resolutions shrunk for CPU runs."""
        return cls(steps=tuple(steps), resolutions=tuple(resolutions))


@dataclass(frozen=True)
class TrialConfig:
    lr: float
    steps: int
    dropout: float
    wd_to_init: float
    mixup_alpha: Optional[float]
    resolution: int

    def policy(self) -> AugPolicy:
        resize = max(self.resolution, int(round(self.resolution * RESIZE_RATIO)))
        return AugPolicy(resize, self.resolution, True, True, self.resolution)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_config(space: SearchSpace, rng: np.random.Generator) -> TrialConfig:
    """One independent draw per field."""
    return TrialConfig(
        lr=_log_uniform(rng, *space.lr_range),
        steps=int(space.steps[rng.integers(len(space.steps))]),
        dropout=float(rng.uniform(*space.dropout_range)),
        wd_to_init=_log_uniform(rng, *space.wd_to_init_range),
        mixup_alpha=space.mixup_alphas[rng.integers(len(space.mixup_alphas))],
        resolution=int(space.resolutions[rng.integers(len(space.resolutions))]),
    )


@dataclass
class TrialResult:
    index: int
    config: TrialConfig
    val_top1: Optional[float]
    seed: int
    train_ids: np.ndarray
    val_ids: np.ndarray
    error: Optional[str] = None

    def __post_init__(self):
        if np.intersect1d(self.train_ids, self.val_ids).size:
            raise ValidationError("validation split overlaps the training split")

    def to_record(self) -> dict:
        return {
            "kind": "trial",
            "index": self.index,
            "seed": self.seed,
            "val_top1": self.val_top1,
            "error": self.error,
            "config": dataclasses.asdict(self.config),
            "n_train": int(self.train_ids.size),
            "n_val": int(self.val_ids.size),
        }


@dataclass
class SearchResult:
    trials: list[TrialResult]
    best_index: int
    curve: list[float]
    retrained: Optional[TrainResult] = None

    @property
    def best(self) -> TrialResult:
        return self.trials[self.best_index]

    def summary(self) -> dict:
        return {
            "kind": "summary",
            "trials": len(self.trials),
            "failed": sum(t.error is not None for t in self.trials),
            "best_index": self.best_index,
            "best_val_top1": self.best.val_top1,
            "best_config": dataclasses.asdict(self.best.config),
            "curve": self.curve,
        }


def best_so_far(scores: Sequence[Optional[float]]) -> list[float]:
    """Running maximum; failed trials (None) count as -inf."""
    out, best = [], -math.inf
    for s in scores:
        if s is not None:
            best = max(best, s)
        out.append(best)
    return out


def median_of_orderings(scores: Sequence[Optional[float]], orderings: int, rng: np.random.Generator) -> np.ndarray:
    """Pointwise median of the best-so-far curve over random trial orderings."""
    vals = np.array([-np.inf if s is None else s for s in scores], dtype=np.float64)
    curves = np.array([np.maximum.accumulate(vals[rng.permutation(vals.size)]) for _ in range(orderings)])
    return np.median(curves, axis=0)


def train_val_split(dataset: Dataset, val_size: int = 200, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint (train, val) split with ``val_size`` validation examples."""
    if not 0 < val_size < len(dataset):
        raise SamplingError(f"cannot hold out {val_size} of {len(dataset)} examples")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[val_size:])), dataset.subset(np.sort(perm[:val_size]))


def run_search(
    checkpoint: Mapping[str, Any],
    model_config: ModelConfig,
    train: Dataset,
    val: Dataset,
    budget_trials: int,
    seed: int = 0,
    space: Optional[SearchSpace] = None,
    batch_size: int = 512,
    retrain_union: bool = False,
    on_trial: Optional[Callable[[TrialResult], None]] = None,
) -> SearchResult:
    """Fine-tune ``budget_trials`` sampled configs and keep the best by validation top-1.

    Only ``train`` and ``val`` are visible here, so selection cannot touch a
    test split.  A trial that raises a library error is recorded with its
    message and the search moves on.
    """
    if budget_trials < 1:
        raise ValidationError("budget_trials must be >= 1")
    if np.intersect1d(train.ids, val.ids).size:
        raise ValidationError("validation split overlaps the training split")
    space = space or SearchSpace()
    root = np.random.SeedSequence(seed)
    sample_rng = np.random.default_rng(root.spawn(1)[0])
    trial_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(budget_trials)]
    val_model = ResNetV2(dataclasses.replace(model_config, num_classes=train.num_classes))

    trials: list[TrialResult] = []
    for i in range(budget_trials):
        cfg = sample_config(space, sample_rng)
        score, error = None, None
        try:
            result = finetune_with(
                checkpoint, model_config, train, None,
                lr=cfg.lr, total_steps=cfg.steps, batch_size=batch_size, policy=cfg.policy(),
                mixup_alpha=cfg.mixup_alpha, dropout_rate=cfg.dropout, wd_to_init=cfg.wd_to_init,
                seed=trial_seeds[i], log_every=max(1, cfg.steps),
            )
            score, _, _ = evaluate(val_model, result.params, val, cfg.policy())
        except BitkitError as exc:
            error = f"{type(exc).__name__}: {exc}"
            logger.warning("trial %d failed: %s", i, error)
        trial = TrialResult(i, cfg, score, trial_seeds[i], train.ids, val.ids, error)
        trials.append(trial)
        logger.info("trial %d val_top1=%s", i, score)
        if on_trial is not None:
            on_trial(trial)

    scores = [t.val_top1 for t in trials]
    if all(s is None for s in scores):
        raise SamplingError("every trial failed")
    best_index = int(np.argmax([-math.inf if s is None else s for s in scores]))
    out = SearchResult(trials, best_index, best_so_far(scores))
    if retrain_union:
        cfg = out.best.config
        out.retrained = finetune_with(
            checkpoint, model_config, concat(train, val, name=f"{train.name}+val"), None,
            lr=cfg.lr, total_steps=cfg.steps, batch_size=batch_size, policy=cfg.policy(),
            mixup_alpha=cfg.mixup_alpha, dropout_rate=cfg.dropout, wd_to_init=cfg.wd_to_init,
            seed=out.best.seed, log_every=max(1, cfg.steps),
        )
    return out
