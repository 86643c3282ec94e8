"""Normalized convolution layers and the ResNet-v2 model builder."""

from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, split_checkpoint
from .norm import group_norm, resolve_groups, weight_standardize
from .resnet import (
    DEPTH_PRESETS,
    ModelConfig,
    Params,
    ResNetV2,
    build_resnet,
    cast_params,
    count_params,
    init_head,
    is_conv_weight,
    is_head_param,
    resnet_block,
)

__all__ = [
    "DEPTH_PRESETS",
    "ModelConfig",
    "Params",
    "ResNetV2",
    "build_resnet",
    "cast_params",
    "count_params",
    "decode_checkpoint",
    "encode_checkpoint",
    "group_norm",
    "init_head",
    "is_conv_weight",
    "is_head_param",
    "load_checkpoint",
    "resnet_block",
    "resolve_groups",
    "save_checkpoint",
    "split_checkpoint",
    "weight_standardize",
]
