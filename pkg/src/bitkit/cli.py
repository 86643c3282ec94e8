"""``bitkit`` command-line tool.

Every subcommand writes line-delimited JSON records (stable key order) to
stdout, or to the file given by the global ``--out``.  Subcommands that
produce an artifact (checkpoint, dataset, pair list, search directory) take
their own ``--out`` after the subcommand name.  Exit status is 0 on success
and 1 when the library reports an error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Iterable, Optional, TextIO

import numpy as np

from . import hyperrule
from .data import AugPolicy, fewshot_subsample, load_dataset, make_shapes, save_dataset, split_by_hash
from .data.synthetic import SHAPES, make_smooth_images
from .errors import BitkitError, UsageError
from .layers import ModelConfig, ResNetV2, split_checkpoint
from .metrics import MetricRow, aggregate
from .optim import OptimizerConfig, upstream_preset
from .records import dumps, read_records

logger = logging.getLogger("bitkit")


class Emitter:
    def __init__(self, stream: TextIO):
        self.stream = stream

    def __call__(self, record: dict) -> None:
        self.stream.write(dumps(record) + "\n")
        self.stream.flush()

    def many(self, records: Iterable[dict]) -> None:
        for r in records:
            self(r)


# -- plan ----------------------------------------------------------------------


def cmd_plan(args, emit: Emitter) -> None:
    task = hyperrule.TaskSpec(
        num_train_examples=args.examples,
        native_height=args.height,
        native_width=args.width,
        num_classes=args.classes,
        allow_flip=not args.no_flip,
        allow_crop=not args.no_crop,
        largest_model_mode=args.xl,
    )
    emit(hyperrule.plan(task).to_dict())


# -- pretrain ------------------------------------------------------------------


def _optimizer_from(spec: dict, n_examples: int) -> OptimizerConfig:
    spec = dict(spec)
    if "preset" in spec:
        batch = spec.get("batch_size", 4096)
        spe = spec.get("steps_per_epoch") or max(1, n_examples // batch)
        return upstream_preset(spec["preset"], spe, batch, spec.get("warmup_steps", 5000))
    sched = spec.get("schedule")
    if sched is not None and sched.get("steps_per_epoch") in (None, "auto"):
        sched = dict(sched, steps_per_epoch=max(1, n_examples // spec.get("batch_size", 256)))
        spec["schedule"] = sched
    return OptimizerConfig.from_dict(spec)


def cmd_pretrain(args, emit: Emitter) -> None:
    from .transfer import pretrain, save_model

    with open(args.config, encoding="utf-8") as f:
        spec = json.load(f)
    dataset = load_dataset(args.data)
    model_config = ModelConfig.from_dict({**spec.get("model", {}), "num_classes": dataset.num_classes})
    opt = _optimizer_from(spec.get("optim", {"preset": "medium"}), len(dataset))
    policy = AugPolicy(**spec["policy"]) if spec.get("policy") else None
    result = pretrain(model_config, opt, dataset, seed=args.seed, policy=policy,
                      log_every=spec.get("log_every", 1), track_norms=spec.get("track_norms", False))
    save_model(args.ckpt_out, result.checkpoint_tensors(), model_config)
    result.record.write(f"{args.ckpt_out}.run.jsonl")
    emit.many(result.record.records())


# -- finetune ------------------------------------------------------------------


def cmd_finetune(args, emit: Emitter) -> None:
    from .transfer import finetune, load_model, save_model

    arrays, model_config = load_model(args.ckpt)
    params, _ = split_checkpoint(arrays)
    dataset = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    if eval_set is None:
        dataset, eval_set = split_by_hash(dataset)
    if args.shots:
        dataset = fewshot_subsample(dataset, args.shots, args.seed)
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.resize is not None:
        overrides["resize_to"] = args.resize
    if args.crop is not None:
        overrides["crop_to"] = args.crop
    result = finetune(params, model_config, dataset, eval_set, plan_overrides=overrides or None,
                      seed=args.seed, desk_batch_size=args.batch)
    config = dataclasses.replace(model_config, num_classes=dataset.num_classes)
    save_model(args.ckpt_out, {k: v.data for k, v in result.params.items()}, config)
    emit.many(result.record.records())


# -- search --------------------------------------------------------------------


def cmd_search(args, emit: Emitter) -> None:
    from .search import SearchSpace, run_search, train_val_split
    from .transfer import load_model

    arrays, model_config = load_model(args.ckpt)
    params, _ = split_checkpoint(arrays)
    dataset = load_dataset(args.data)
    train, val = train_val_split(dataset, args.val_size, args.seed)
    space = SearchSpace.desk() if args.desk else SearchSpace()
    os.makedirs(args.dir_out, exist_ok=True)
    trial_path = os.path.join(args.dir_out, "trials.jsonl")
    with open(trial_path, "w", encoding="utf-8") as trial_file:

        def on_trial(trial):
            rec = trial.to_record()
            trial_file.write(dumps(rec) + "\n")
            trial_file.flush()
            emit(rec)

        result = run_search(params, model_config, train, val, args.trials, seed=args.seed, space=space,
                            batch_size=args.batch, retrain_union=args.retrain, on_trial=on_trial)
    summary = result.summary()
    with open(os.path.join(args.dir_out, "summary.json"), "w", encoding="utf-8") as f:
        f.write(dumps(summary) + "\n")
    emit(summary)


# -- dedup ---------------------------------------------------------------------


def cmd_dedup(args, emit: Emitter) -> None:
    from .dedup import backbone_embedder, dedup_report, find_near_duplicates, fingerprint_batch
    from .records import write_records
    from .transfer import load_model

    upstream = load_dataset(args.upstream)
    test = load_dataset(args.test)
    embedder, model, params = None, None, None
    if args.ckpt:
        arrays, model_config = load_model(args.ckpt)
        params, _ = split_checkpoint(arrays)
        model = ResNetV2(model_config)
        embedder = backbone_embedder(model, params)
    pairs = find_near_duplicates(fingerprint_batch(upstream.images, embedder), fingerprint_batch(test.images, embedder),
                                 args.hamming, args.cosine)
    records = [p.to_record() for p in pairs]
    if args.pairs_out:
        write_records(records, args.pairs_out)
    emit.many(records)
    if model is not None and model.config.num_classes == test.num_classes:
        emit(dedup_report(test, pairs, model, params).to_record())
    else:
        emit({"kind": "dedup_summary", "dup_count": len({p.test_idx for p in pairs}), "n_total": len(test)})


# -- eval ----------------------------------------------------------------------


def cmd_eval(args, emit: Emitter) -> None:
    if args.aggregate:
        rows = []
        for path in args.aggregate:
            for rec in read_records(path):
                rows.append(MetricRow(**{k: rec[k] for k in ("task", "top1", "top5", "n_eval", "model_id", "seed")}))
        summaries, suite = aggregate(rows)
        for s in summaries.values():
            emit({"kind": "task_summary", **dataclasses.asdict(s)})
        emit({"kind": "suite", "score": suite, "tasks": len(summaries)})
        return
    if not (args.ckpt and args.data):
        raise UsageError("eval needs --ckpt and --data, or --aggregate")
    from .transfer import evaluate, load_model

    arrays, model_config = load_model(args.ckpt)
    params, _ = split_checkpoint(arrays)
    dataset = load_dataset(args.data)
    policy = AugPolicy(args.resize, args.resize, False, False, args.resize) if args.resize else None
    top1, top5, _ = evaluate(ResNetV2(model_config), params, dataset, policy)
    row = MetricRow(args.task or dataset.name, top1, top5, len(dataset), os.path.basename(args.ckpt), args.seed)
    emit(dataclasses.asdict(row))


# -- normcompare ---------------------------------------------------------------


def cmd_normcompare(args, emit: Emitter) -> None:
    from .normcompare import VARIANTS, normcompare

    train = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    if eval_set is None:
        train, eval_set = split_by_hash(train)
    config = ModelConfig(depth_preset=args.depth, base_width=args.base_width, num_groups=args.groups,
                         num_classes=train.num_classes, input_channels=train.image_shape[0])
    result = normcompare(train, eval_set, config, args.batch, seeds=tuple(range(args.seed, args.seed + args.seeds)),
                         variants=args.variants or VARIANTS, epochs=args.epochs, base_lr=args.lr,
                         ghost_batch=args.ghost_batch)
    emit.many(result.records())
    emit({"kind": "pairing", "paired": result.paired()})


# -- synth-data ----------------------------------------------------------------


def cmd_synth(args, emit: Emitter) -> None:
    from .data import Dataset

    if args.kind == "shapes":
        names = args.shapes.split(",") if args.shapes else SHAPES[args.first_class : args.first_class + args.classes]
        ds = make_shapes(args.n, shapes=names, size=args.size, seed=args.seed)
    else:
        images = make_smooth_images(args.n, args.size, seed=args.seed)
        ds = Dataset(images, np.zeros(args.n, dtype=np.int64), 1, "smooth")
    save_dataset(ds, args.data_out)
    emit({"kind": "dataset", "path": args.data_out, "n": len(ds), "num_classes": ds.num_classes,
          "shape": list(ds.image_shape)})


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitkit", description="Pre-train, fine-tune and audit small ResNet-v2 models.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    parser.add_argument("--out", default=None, help="record output file (default stdout)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def seed_flag(p):
        # per-command alias of the global flag; absent means "keep the global value"
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("plan", help="fine-tuning plan for a task")
    p.add_argument("--examples", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--no-crop", action="store_true")
    p.add_argument("--xl", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("pretrain", help="train from scratch on an upstream dataset")
    p.add_argument("--config", required=True, help="JSON with model and optim sections (policy is optional)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", dest="ckpt_out", required=True, help="checkpoint path")
    seed_flag(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with the HyperRule plan")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override planned step count")
    p.add_argument("--resize", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--batch", type=int, default=None, help="desk batch size (lr scaled by batch/512)")
    p.add_argument("--out", dest="ckpt_out", required=True)
    seed_flag(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--val-size", type=int, default=200)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--desk", action="store_true", help="shrunken step counts and resolutions")
    p.add_argument("--retrain", action="store_true", help="retrain the best config on train+val")
    p.add_argument("--out", dest="dir_out", required=True, help="output directory")
    seed_flag(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("dedup", help="near-duplicates between an upstream and a test set")
    p.add_argument("--upstream", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--hamming", type=int, default=6)
    p.add_argument("--cosine", type=float, default=0.95)
    p.add_argument("--out", dest="pairs_out", default=None, help="pair list file")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint, or aggregate metric rows")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--task", default=None)
    p.add_argument("--resize", type=int, default=None)
    p.add_argument("--aggregate", nargs="+", default=None, help="metric-row files to summarize")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("normcompare", help="BN/GN x plain/WS from-scratch comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--depth", default="toy-8")
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--ghost-batch", type=int, default=None)
    p.add_argument("--variants", nargs="+", default=None)
    p.set_defaults(func=cmd_normcompare)

    p = sub.add_parser("synth-data", help="write a synthetic BITD dataset")
    p.add_argument("--kind", choices=("shapes", "smooth"), default="shapes")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--first-class", type=int, default=0, help="offset into the shape list")
    p.add_argument("--shapes", default=None, help="comma-separated shape names")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", dest="data_out", required=True)
    seed_flag(p)
    p.set_defaults(func=cmd_synth)
    return parser


@contextlib.contextmanager
def _thread_limit(threads: Optional[int]):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with contextlib.ExitStack() as stack:
            stream = stack.enter_context(open(args.out, "w", encoding="utf-8")) if args.out else sys.stdout
            stack.enter_context(_thread_limit(args.threads))
            args.func(args, Emitter(stream))
    except (BitkitError, OSError) as exc:
        sys.stderr.write(dumps({"kind": "error", "type": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
