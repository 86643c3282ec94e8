"""BN vs GN, with and without WS: a paired from-scratch comparison.

The batch-norm model here is scaffolding for the comparison only.  Every
variant shares parameter names, initialization, data order and schedule;
only the normalization statistics and the weight standardization switch
differ.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Dataset
from .engine import Tensor, ops
from .errors import ConfigError
from .layers import ModelConfig, ResNetV2
from .optim import OptimizerConfig, UpstreamSchedule, WeightDecay
from .transfer import evaluate, train

logger = logging.getLogger(__name__)

VARIANTS = ("BN", "GN", "BN+WS", "GN+WS")


class BatchNormResNet(ResNetV2):
    """ResNetV2 whose norm layers use batch statistics while training.

    Per-channel mean and variance are taken over (N, H, W) of the current
    batch, or over consecutive chunks of ``ghost_batch`` examples to mimic
    per-device statistics.  Evaluation uses exponential running averages.
    """

    def __init__(self, config: ModelConfig, momentum: float = 0.9, ghost_batch: Optional[int] = None):
        super().__init__(config)
        self.momentum = momentum
        self.ghost_batch = ghost_batch
        self.running: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def norm(self, x: Tensor, params: Mapping[str, Tensor], name: str, train: bool) -> Tensor:
        n, c, h, w = x.shape
        gamma = ops.reshape(params[f"{name}/gamma"], (1, c, 1, 1))
        beta = ops.reshape(params[f"{name}/beta"], (1, c, 1, 1))
        eps = self.config.gn_eps
        if train:
            g = self.ghost_batch or n
            if n % g:
                raise ConfigError(f"batch {n} is not a multiple of ghost batch {g}")
            k = n // g
            # (k, g, c, h, w) -> (k, c, g, h, w) -> rows of one channel within one chunk
            chunks = ops.transpose(ops.reshape(x, (k, g, c, h, w)), (0, 2, 1, 3, 4))
            rows = ops.standardize_rows(ops.reshape(chunks, (k * c, g * h * w)), eps)
            xn = ops.reshape(ops.transpose(ops.reshape(rows, (k, c, g, h, w)), (0, 2, 1, 3, 4)), (n, c, h, w))
            data = x.data.astype(np.float64)
            mean = data.mean(axis=(0, 2, 3))
            var = data.var(axis=(0, 2, 3))
            if name in self.running:
                m0, v0 = self.running[name]
                mean = self.momentum * m0 + (1 - self.momentum) * mean
                var = self.momentum * v0 + (1 - self.momentum) * var
            self.running[name] = (mean, var)
        else:
            mean, var = self.running.get(name, (np.zeros(c), np.ones(c)))
            shift = Tensor(mean.reshape(1, c, 1, 1).astype(x.dtype))
            scale = Tensor((1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1).astype(x.dtype))
            xn = ops.mul(ops.sub(x, shift), scale)
        return ops.add(ops.mul(xn, gamma), beta)


def build_variant(variant: str, config: ModelConfig, ghost_batch: Optional[int] = None) -> ResNetV2:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = dataclasses.replace(config, weight_std=variant.endswith("+WS"))
    if variant.startswith("BN"):
        return BatchNormResNet(cfg, ghost_batch=ghost_batch)
    return ResNetV2(cfg)


@dataclass
class NormCompareResult:
    scores: dict[str, list[float]] = field(default_factory=dict)
    batch_hashes: dict[str, list[list[str]]] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()
    batch_size: int = 0

    def median(self, variant: str) -> float:
        return statistics.median(self.scores[variant])

    def paired(self) -> bool:
        """True when every variant saw the same batches for each seed."""
        hashes = list(self.batch_hashes.values())
        return all(h == hashes[0] for h in hashes[1:])

    def table(self) -> list[dict]:
        rows = []
        for norm in ("BN", "GN"):
            row = {"norm": norm}
            for conv, suffix in (("plain", ""), ("ws", "+WS")):
                v = norm + suffix
                row[conv] = self.median(v) if v in self.scores else None
            rows.append(row)
        return rows

    def records(self) -> list[dict]:
        out = []
        for v, vals in self.scores.items():
            for seed, acc in zip(self.seeds, vals):
                out.append({"kind": "cell_run", "variant": v, "seed": seed, "top1": acc})
        for row in self.table():
            out.append({"kind": "table_row", "batch_size": self.batch_size, **row})
        return out


def normcompare(
    train_set: Dataset,
    eval_set: Dataset,
    model_config: ModelConfig,
    batch_size: int,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    variants: Sequence[str] = VARIANTS,
    epochs: int = 10,
    base_lr: float = 0.03,
    warmup_epochs: int = 1,
    weight_decay: float = 1e-4,
    ghost_batch: Optional[int] = None,
) -> NormCompareResult:
    """Train each variant from scratch per seed and score top-1 on ``eval_set``."""
    spe = max(1, len(train_set) // batch_size)
    milestones = tuple(m for m in (round(epochs * 0.5), round(epochs * 0.75), round(epochs * 0.9)) if 0 < m < epochs)
    opt = OptimizerConfig(
        base_lr=base_lr,
        momentum=0.9,
        batch_size=batch_size,
        weight_decay=WeightDecay("toward_zero", weight_decay),
        schedule=UpstreamSchedule(tuple(sorted(set(milestones))), spe, epochs, warmup_epochs * spe, lr_scaling=True),
    )
    config = dataclasses.replace(model_config, num_classes=train_set.num_classes)
    result = NormCompareResult(seeds=tuple(seeds), batch_size=batch_size)
    for v in variants:
        result.scores[v] = []
        result.batch_hashes[v] = []
        for seed in seeds:
            model = build_variant(v, config, ghost_batch)
            params = model.init_params(seed)
            run = train(model, params, opt, train_set, seed=seed, log_every=1)
            top1, _, _ = evaluate(model, run.params, eval_set)
            result.scores[v].append(top1)
            result.batch_hashes[v].append([s["batch_hash"] for s in run.record.steps])
            logger.info("normcompare %s seed=%d top1=%.4f", v, seed, top1)
    return result
