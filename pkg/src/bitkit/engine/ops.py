"""Differentiable tensor ops and the cross-entropy loss."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from ..errors import DimensionError, UsageError, ValidationError
from .tensor import Tensor, as_tensor, make_node

Operand = Union[Tensor, float, int, np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad / bd, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_node(out, (x,), lambda g: (g / xd,), "log")


def _norm_axis(axis, ndim) -> Optional[tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = x.size if axes is None else int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_node(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        "transpose",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def pad2d(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of an NCHW tensor."""
    if padding < 0:
        raise UsageError("padding must be non-negative")
    if padding == 0:
        return x
    p = padding
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def backward(g):
        return (np.ascontiguousarray(g[:, :, p:-p, p:-p]),)

    return make_node(out, (x,), backward, "pad2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial axes: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling over NCHW with -inf padding."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    k, s, p = kernel, stride, padding
    hp, wp = h + 2 * p, w + 2 * p
    if k > hp or k > wp or s < 1:
        raise DimensionError(f"pool window {k} does not fit padded input {hp}x{wp}")
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, ho, wo, k, k), strides=(sn, sc, sh * s, sw * s, sh, sw), writeable=False
    ).reshape(n, c, ho, wo, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                gp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += g * (arg == ki * k + kj)
        return (np.ascontiguousarray(gp[:, :, p : p + h, p : p + w]),)

    return make_node(out, (x,), backward, "max_pool2d")


def standardize_rows(x: Tensor, eps: float) -> Tensor:
    """Normalize each row of a 2-D tensor to zero mean and unit variance.

    Population variance; ``eps`` is added under the square root.  This is
    the shared kernel behind weight standardization and group/batch norm.
    """
    if x.ndim != 2:
        raise DimensionError(f"standardize_rows expects 2-D input, got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_node(y, (x,), backward, "standardize")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``rate == 0`` returns ``x`` unchanged."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, target_probs) -> Tensor:
    """Mean over rows of ``-sum(target * log_softmax(logits))``.

    ``target_probs`` is treated as a constant (soft labels from MixUp or
    one-hot rows); every row must sum to 1 within 1e-6.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}")
    t = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    if logits.shape[1] < 2:
        raise DimensionError("softmax_cross_entropy needs at least 2 classes")
    row_sums = t.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValidationError(f"target row {bad} sums to {row_sums[bad]!r}, expected 1")
    t = t.astype(logits.dtype, copy=False)
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -(t * logp).sum() / n

    def backward(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
