"""2-D convolution via im2col + a single matmul."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, make_node


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold a padded NCHW array into rows of (C*K*K) patch values.

    Row order is (n, oh, ow); column order is (c, ki, kj), matching a
    weight tensor flattened from OIKK.
    """
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return windows.reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add patch rows back onto a padded NCHW array (adjoint of im2col)."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    patches = cols.reshape(n, ho, wo, c, k, k)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += patches[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate NCHW ``x`` with OIKK ``weight`` (square kernels, no bias)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise DimensionError(f"weight expects {i} input channels, input has {c}")
    if kh != kw:
        raise DimensionError(f"only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k} does not fit padded input {hp}x{wp}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)

    xd = x.data
    wmat = weight.data.reshape(o, c * k * k)
    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = im2col(xp, k, stride, ho, wo)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if k == 1 and padding == 0:
                gs = gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gs
                else:
                    gx = np.ascontiguousarray(gs)
            else:
                gp = col2im(gcols, (n, c, hp, wp), k, stride, ho, wo)
                gx = np.ascontiguousarray(gp[:, :, padding : padding + h, padding : padding + w])
        return gx, gw

    return make_node(np.ascontiguousarray(out), (x, weight), backward, "conv2d")
