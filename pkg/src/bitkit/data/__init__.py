"""Datasets plus the preprocessing and sampling helpers around them."""

from .augment import (
    AugPolicy,
    bilinear_resize,
    mixup_batch,
    preprocess_eval,
    preprocess_train,
    preprocess_train_batch,
    sample_mixup_lambda,
)
from .dataset import (
    Dataset,
    concat,
    decode_dataset,
    fewshot_subsample,
    load_dataset,
    save_dataset,
    split_by_hash,
)
from .synthetic import SHAPES, make_shapes, make_smooth_images, render_shape

__all__ = [
    "AugPolicy",
    "Dataset",
    "SHAPES",
    "bilinear_resize",
    "concat",
    "decode_dataset",
    "fewshot_subsample",
    "load_dataset",
    "make_shapes",
    "make_smooth_images",
    "mixup_batch",
    "preprocess_eval",
    "preprocess_train",
    "preprocess_train_batch",
    "render_shape",
    "sample_mixup_lambda",
    "save_dataset",
    "split_by_hash",
]
