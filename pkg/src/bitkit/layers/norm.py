"""Weight Standardization and Group Normalization."""

from __future__ import annotations

from ..engine import Tensor, ops
from ..errors import ConfigError, DegenerateFilterError, DimensionError


def weight_standardize(w: Tensor, eps: float) -> Tensor:
    """Standardize every output filter of an OIKK weight over its fan-in.

    Runs inside the graph, so gradients flow through the mean and variance.
    """
    if w.ndim != 4:
        raise DimensionError(f"expected OIKK weight, got shape {w.shape}")
    o = w.shape[0]
    fan_in = w.size // o
    if fan_in < 2:
        raise DegenerateFilterError(f"fan-in {fan_in} is too small to standardize")
    flat = ops.reshape(w, (o, fan_in))
    return ops.reshape(ops.standardize_rows(flat, eps), w.shape)


def resolve_groups(channels: int, num_groups: int) -> int:
    """Group count for a layer: ``num_groups``, or one group per channel below that."""
    groups = num_groups if channels >= num_groups else channels
    if channels % groups:
        raise ConfigError(f"{channels} channels are not divisible into {groups} groups")
    return groups


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels are not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    rows = ops.reshape(x, (n * groups, (c // groups) * h * w))
    xn = ops.reshape(ops.standardize_rows(rows, eps), (n, c, h, w))
    return ops.add(ops.mul(xn, ops.reshape(gamma, (1, c, 1, 1))), ops.reshape(beta, (1, c, 1, 1)))
