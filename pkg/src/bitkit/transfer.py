"""Upstream pre-training, head re-initialization and HyperRule fine-tuning."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Optional

import numpy as np

from . import hyperrule
from .data import AugPolicy, Dataset, mixup_batch, preprocess_eval, preprocess_train_batch, split_by_hash
from .data.augment import sample_mixup_lambda
from .engine import Tensor, backward, no_grad, one_hot, softmax_cross_entropy
from .errors import ConfigError, FormatError, NumericError, TrainingDivergedError, ValidationError
from .layers import ModelConfig, Params, ResNetV2, init_head, is_conv_weight, is_head_param, load_checkpoint, save_checkpoint
from .metrics import topk_accuracy
from .optim import OptimizerConfig, TrainState, WeightDecay, downstream_config, effective_lr, sgd_step
from .records import read_records, write_records

logger = logging.getLogger(__name__)


@dataclass
class RunRecord:
    config: dict
    seed: int
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def records(self) -> Iterator[dict]:
        yield {"kind": "config", "seed": self.seed, "config": self.config}
        for s in self.steps:
            yield {"kind": "step", **s}
        for e in self.evals:
            yield {"kind": "eval", **e}
        yield {"kind": "final", **self.final}

    def write(self, path) -> None:
        write_records(self.records(), path)

    @classmethod
    def read(cls, path) -> "RunRecord":
        rec = None
        for line in read_records(path):
            kind = line.pop("kind")
            if kind == "config":
                rec = cls(line["config"], line["seed"])
            elif rec is None:
                raise ValidationError("run record must start with a config line")
            elif kind == "step":
                rec.steps.append(line)
            elif kind == "eval":
                rec.evals.append(line)
            elif kind == "final":
                rec.final = line
        if rec is None:
            raise ValidationError("empty run record")
        return rec

    def lr_trace(self) -> list[tuple[int, float]]:
        return [(s["step"], s["lr"]) for s in self.steps]


@dataclass
class TrainResult:
    params: Params
    state: TrainState
    record: RunRecord

    def checkpoint_tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.state.to_records())
        return out


class BatchStream:
    """Endless stream of index batches drawn from successive shuffles."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._buf = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._buf.size < self.batch_size:
            self._buf = np.concatenate([self._buf, self.rng.permutation(self.n)])
        out, self._buf = self._buf[: self.batch_size], self._buf[self.batch_size :]
        return out


def batch_hash(indices: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(indices, dtype="<i8").tobytes()).hexdigest()[:16]


def conv_weight_norm(params: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(v.data.astype(np.float64) ** 2)) for k, v in params.items() if is_conv_weight(k))))


def evaluate(
    model: ResNetV2,
    params: Mapping[str, Tensor],
    dataset: Dataset,
    policy: Optional[AugPolicy] = None,
    batch_size: int = 250,
) -> tuple[float, Optional[float], np.ndarray]:
    """(top1, top5 or None when fewer than 5 classes, logits)."""
    chunks = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            if policy is not None:
                x = preprocess_eval(x, policy)
            chunks.append(model.forward(params, Tensor(x)).data)
    logits = np.concatenate(chunks)
    top5 = topk_accuracy(logits, dataset.labels, 5) if dataset.num_classes >= 5 else None
    return topk_accuracy(logits, dataset.labels, 1), top5, logits


def train(
    model: ResNetV2,
    params: Params,
    opt: OptimizerConfig,
    dataset: Dataset,
    *,
    seed: int,
    total_steps: Optional[int] = None,
    state: Optional[TrainState] = None,
    policy: Optional[AugPolicy] = None,
    mixup_alpha: Optional[float] = None,
    dropout_rate: float = 0.0,
    eval_dataset: Optional[Dataset] = None,
    eval_steps=(),
    log_every: int = 1,
    track_norms: bool = False,
    record: Optional[RunRecord] = None,
) -> TrainResult:
    """Generic SGD loop shared by pre-training, fine-tuning and the search/comparison harnesses."""
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, head has {model.config.num_classes}")
    if mixup_alpha is not None and opt.batch_size < 2:
        raise ConfigError("mixup needs batch_size >= 2")
    total = opt.total_steps if total_steps is None else total_steps
    state = state or TrainState.create(params)
    record = record or RunRecord({}, seed)
    rng = np.random.default_rng(seed)
    stream = BatchStream(len(dataset), opt.batch_size, rng)
    eval_at: list[int] = []
    if eval_dataset is not None:
        eval_at = sorted(set(int(s) for s in eval_steps if 0 < s <= total) | {total})
    grad_norm = 0.0
    if eval_at and eval_at[0] == 0:
        _log_eval(record, model, params, eval_dataset, policy, 0)
    for step in range(total):
        idx = stream.next()
        x = dataset.images[idx]
        if policy is not None:
            x = preprocess_train_batch(x, policy, rng)
        y = one_hot(dataset.labels[idx], dataset.num_classes, x.dtype)
        lam = None
        if mixup_alpha is not None:
            lam = sample_mixup_lambda(mixup_alpha, rng)
            x, y = mixup_batch(x, y, mixup_alpha, rng, lam=lam)
        lr = effective_lr(opt, state.step)
        # overflow is caught below as divergence, not reported as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                logits = model.forward(params, Tensor(x), train=True, dropout_rate=dropout_rate, rng=rng)
                loss = softmax_cross_entropy(logits, y)
                leaf_grads = backward(loss)
            except NumericError as exc:
                raise TrainingDivergedError(state.step, lr, grad_norm, float("nan")) from exc
            grads = {name: leaf_grads[p] for name, p in params.items() if p in leaf_grads}
            grad_norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
            loss_value = loss.item()
            if not np.isfinite(loss_value) or not np.isfinite(grad_norm):
                raise TrainingDivergedError(state.step, lr, grad_norm, loss_value)
            params, state = sgd_step(params, grads, state, opt, lr)
        if step % log_every == 0 or step == total - 1:
            entry: dict[str, Any] = {
                "step": step,
                "lr": lr,
                "train_loss": loss_value,
                "grad_norm": grad_norm,
                "mixup_lambda": lam,
                "batch_hash": batch_hash(idx),
            }
            if track_norms:
                entry["conv_weight_norm"] = conv_weight_norm(params)
            record.steps.append(entry)
        if eval_at and step + 1 in eval_at:
            _log_eval(record, model, params, eval_dataset, policy, step + 1)
    final = {"steps": total}
    if record.evals:
        final.update(top1=record.evals[-1]["top1"], top5=record.evals[-1]["top5"])
    record.final = final
    return TrainResult(params, state, record)


def _log_eval(record, model, params, dataset, policy, step) -> None:
    top1, top5, _ = evaluate(model, params, dataset, policy)
    record.evals.append({"step": step, "top1": top1, "top5": top5})
    logger.info("eval step=%d top1=%.4f", step, top1)


def pretrain(
    model_config: ModelConfig,
    optimizer_config: OptimizerConfig,
    dataset: Dataset,
    seed: int = 0,
    policy: Optional[AugPolicy] = None,
    eval_dataset: Optional[Dataset] = None,
    log_every: int = 1,
    track_norms: bool = False,
) -> TrainResult:
    """Train from scratch on an upstream dataset with the configured schedule."""
    if optimizer_config.schedule is None:
        raise ConfigError("pre-training needs a schedule")
    if dataset.num_classes != model_config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model head has {model_config.num_classes}")
    model = ResNetV2(model_config)
    params = model.init_params(seed)
    record = RunRecord(
        {
            "phase": "pretrain",
            "model": model_config.to_dict(),
            "optim": optimizer_config.to_dict(),
            "policy": None if policy is None else dataclasses.asdict(policy),
            "dataset": {"name": dataset.name, "n": len(dataset), "num_classes": dataset.num_classes},
        },
        seed,
    )
    milestones = optimizer_config.schedule.milestones()
    return train(
        model,
        params,
        optimizer_config,
        dataset,
        seed=seed,
        policy=policy,
        eval_dataset=eval_dataset,
        eval_steps=milestones,
        log_every=log_every,
        track_norms=track_norms,
        record=record,
    )


def backbone_of(params: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in params.items() if not is_head_param(k) and not k.startswith("optim/")}


def reinit_head(checkpoint: Mapping[str, Any], new_num_classes: int) -> Params:
    """Copy every backbone tensor and attach a fresh zero head for ``new_num_classes``."""
    missing = [k for k in ("head/gn/gamma", "stem/conv/w") if k not in checkpoint]
    if missing:
        raise FormatError(f"checkpoint lacks {missing}", 0)
    out: Params = {}
    for name, value in backbone_of(checkpoint).items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        out[name] = Tensor(arr.copy(), requires_grad=True)
    feature_dim = out["head/gn/gamma"].shape[0]
    out.update(init_head(feature_dim, new_num_classes))
    return out


def check_backbone(model: ResNetV2, params: Mapping[str, Tensor]) -> None:
    expected = backbone_of(model.init_params(0))
    got = backbone_of(params)
    if set(expected) != set(got):
        diff = sorted(set(expected) ^ set(got))[:5]
        raise ConfigError(f"checkpoint does not match architecture; differing tensors: {diff}")
    for k, v in expected.items():
        if got[k].shape != v.shape:
            raise ConfigError(f"{k}: checkpoint shape {got[k].shape} != architecture shape {v.shape}")


@dataclass
class FinetuneResult(TrainResult):
    plan: Optional[hyperrule.HyperRulePlan] = None


def derive_task(dataset: Dataset, **overrides) -> hyperrule.TaskSpec:
    _, h, w = dataset.image_shape
    task = hyperrule.TaskSpec(len(dataset), h, w, dataset.num_classes)
    return dataclasses.replace(task, **overrides) if overrides else task


def apply_plan_overrides(plan: hyperrule.HyperRulePlan, overrides: Optional[Mapping[str, Any]]) -> hyperrule.HyperRulePlan:
    """Desk-scale adjustments (shorter runs, smaller images); decay steps follow total_steps."""
    if not overrides:
        return plan
    overrides = dict(overrides)
    if "total_steps" in overrides and "decay_steps" not in overrides:
        overrides["decay_steps"] = hyperrule.decay_steps(overrides["total_steps"])
    return dataclasses.replace(plan, **overrides)


def finetune(
    checkpoint: Mapping[str, Any],
    model_config: ModelConfig,
    train_dataset: Dataset,
    eval_dataset: Optional[Dataset] = None,
    task_overrides: Optional[Mapping[str, Any]] = None,
    plan_overrides: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    desk_batch_size: Optional[int] = None,
    log_every: int = 1,
) -> FinetuneResult:
    """Fine-tune with the HyperRule plan: no weight decay; MixUp and the schedule follow the plan.

    ``desk_batch_size`` shrinks the batch below the planned 512 and scales the
    learning rate linearly with it.  Without ``eval_dataset`` a deterministic
    80/20 hash split of ``train_dataset`` provides the held-out set.
    """
    if eval_dataset is None:
        train_dataset, eval_dataset = split_by_hash(train_dataset)
    config = dataclasses.replace(model_config, num_classes=train_dataset.num_classes)
    model = ResNetV2(config)
    params = reinit_head(checkpoint, config.num_classes)
    check_backbone(model, params)

    task = derive_task(train_dataset, **dict(task_overrides or {}))
    plan = apply_plan_overrides(hyperrule.plan(task), plan_overrides)
    lr, batch = plan.lr, plan.batch_size
    if desk_batch_size is not None:
        lr = plan.lr * desk_batch_size / plan.batch_size
        batch = desk_batch_size
    opt = downstream_config(plan.total_steps, base_lr=lr, batch_size=batch)
    if opt.weight_decay.mode != "none":
        raise ConfigError("fine-tuning must not use weight decay")
    if tuple(opt.schedule.milestones()) != tuple(plan.decay_steps):
        raise ConfigError(f"schedule milestones {opt.schedule.milestones()} disagree with plan {plan.decay_steps}")
    policy = AugPolicy.from_plan(plan)
    record = RunRecord(
        {
            "phase": "finetune",
            "model": config.to_dict(),
            "optim": opt.to_dict(),
            "plan": plan.to_dict(),
            "task": dataclasses.asdict(task),
            "mixup_alpha": plan.mixup_alpha,
            "dataset": {"name": train_dataset.name, "n": len(train_dataset), "num_classes": train_dataset.num_classes},
        },
        seed,
    )
    result = train(
        model,
        params,
        opt,
        train_dataset,
        seed=seed,
        policy=policy,
        mixup_alpha=plan.mixup_alpha,
        eval_dataset=eval_dataset,
        eval_steps=plan.decay_steps,
        log_every=log_every,
        record=record,
    )
    return FinetuneResult(result.params, result.state, result.record, plan)


def finetune_with(
    checkpoint: Mapping[str, Any],
    model_config: ModelConfig,
    train_dataset: Dataset,
    eval_dataset: Optional[Dataset],
    *,
    lr: float,
    total_steps: int,
    batch_size: int,
    policy: AugPolicy,
    mixup_alpha: Optional[float] = None,
    dropout_rate: float = 0.0,
    wd_to_init: float = 0.0,
    seed: int = 0,
    log_every: int = 1,
) -> TrainResult:
    """Fine-tune with explicit hyperparameters (random-search trials).

    With ``wd_to_init > 0`` the freshly re-initialized weights are snapshotted
    before the first step and decay pulls toward them.
    """
    config = dataclasses.replace(model_config, num_classes=train_dataset.num_classes)
    model = ResNetV2(config)
    params = reinit_head(checkpoint, config.num_classes)
    check_backbone(model, params)
    decay = WeightDecay("toward_init", wd_to_init) if wd_to_init > 0 else WeightDecay()
    opt = downstream_config(total_steps, base_lr=lr, batch_size=batch_size, weight_decay=decay)
    state = TrainState.create(params, snapshot=wd_to_init > 0)
    record = RunRecord(
        {
            "phase": "finetune-trial",
            "model": config.to_dict(),
            "optim": opt.to_dict(),
            "policy": dataclasses.asdict(policy),
            "mixup_alpha": mixup_alpha,
            "dropout": dropout_rate,
            "dataset": {"name": train_dataset.name, "n": len(train_dataset), "num_classes": train_dataset.num_classes},
        },
        seed,
    )
    return train(
        model,
        params,
        opt,
        train_dataset,
        seed=seed,
        state=state,
        policy=policy,
        mixup_alpha=mixup_alpha,
        dropout_rate=dropout_rate,
        eval_dataset=eval_dataset,
        log_every=log_every,
        record=record,
    )


def config_path(checkpoint_path) -> str:
    """Sidecar JSON holding the ModelConfig of a checkpoint (BITC carries tensors only)."""
    return f"{os.fspath(checkpoint_path)}.config.json"


def save_model(path, tensors: Mapping[str, Any], model_config: ModelConfig) -> None:
    save_checkpoint(path, {k: (v.data if isinstance(v, Tensor) else v) for k, v in tensors.items()})
    with open(config_path(path), "w", encoding="utf-8") as f:
        json.dump(model_config.to_dict(), f, indent=2)


def load_model(path, model_config: Optional[ModelConfig] = None) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Checkpoint arrays plus the model config (sidecar file unless given explicitly)."""
    arrays = load_checkpoint(path)
    if model_config is None:
        try:
            with open(config_path(path), encoding="utf-8") as f:
                model_config = ModelConfig.from_dict(json.load(f))
        except FileNotFoundError as exc:
            raise ConfigError(f"no model config next to {os.fspath(path)}; expected {config_path(path)}") from exc
    return arrays, model_config
