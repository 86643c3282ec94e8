"""Top-k accuracy and VTAB-style aggregation."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import UsageError, ValidationError


@dataclass(frozen=True)
class MetricRow:
    task: str
    top1: float
    top5: Optional[float]
    n_eval: int
    model_id: str
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ValidationError(f"top1 {self.top1} outside [0, 1]")
        if self.top5 is not None:
            if not 0.0 <= self.top5 <= 1.0:
                raise ValidationError(f"top5 {self.top5} outside [0, 1]")
            if self.top5 < self.top1:
                raise ValidationError("top5 cannot be below top1")


def topk_predictions(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; ties go to the lower class index."""
    logits = np.asarray(logits)
    if k < 1 or k > logits.shape[1]:
        raise UsageError(f"k={k} must be in [1, {logits.shape[1]}]")
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    labels = np.asarray(labels)
    top = topk_predictions(logits, k)
    if labels.shape[0] != top.shape[0]:
        raise UsageError("logits and labels disagree on N")
    if labels.size == 0:
        raise UsageError("cannot score an empty set")
    return float((top == labels[:, None]).any(axis=1).mean())


def predictions(logits: np.ndarray) -> np.ndarray:
    return topk_predictions(logits, 1)[:, 0]


@dataclass(frozen=True)
class TaskSummary:
    task: str
    median: float
    stddev: float
    runs: int


def aggregate(rows: Iterable[MetricRow] | Mapping[str, Sequence[float]]) -> tuple[dict[str, TaskSummary], float]:
    """Per-task median and sample stddev over runs, plus the unweighted suite mean of medians."""
    if isinstance(rows, Mapping):
        groups = {task: [float(v) for v in vals] for task, vals in rows.items()}
    else:
        groups = {}
        for row in rows:
            groups.setdefault(row.task, []).append(row.top1)
    if not groups:
        raise ValidationError("nothing to aggregate")
    summaries = {}
    for task, vals in groups.items():
        if not vals:
            raise ValidationError(f"task {task!r} has no runs")
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        summaries[task] = TaskSummary(task, statistics.median(vals), sd, len(vals))
    suite = statistics.fmean(sorted(s.median for s in summaries.values()))
    return summaries, suite
