"""BITC checkpoint container.

Layout (all integers u32 little-endian)::

    b"BITC" | version | { name_len | name (UTF-8) | rank | dims[rank] | f32 payload }*

Records run to end of file.  Optimizer state shares the container under
names prefixed ``optim/``.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping, Union

import numpy as np

from ..engine import Tensor
from ..errors import FormatError

MAGIC = b"BITC"
VERSION = 1

PathLike = Union[str, os.PathLike]


def encode_checkpoint(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        # not ascontiguousarray: it promotes 0-d arrays to 1-d
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise FormatError("file too short for BITC header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    pos = 8
    end = len(buf)

    def take(n: int, what: str) -> int:
        nonlocal pos
        if pos + n > end:
            raise FormatError(f"truncated while reading {what}", pos)
        start = pos
        pos += n
        return start

    while pos < end:
        (name_len,) = struct.unpack_from("<I", buf, take(4, "name length"))
        start = take(name_len, "name")
        try:
            name = buf[start : start + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", start) from exc
        (rank,) = struct.unpack_from("<I", buf, take(4, "rank"))
        dims = struct.unpack_from(f"<{rank}I", buf, take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        start = take(4 * count, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)
    return out


def save_checkpoint(path: PathLike, tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    data = encode_checkpoint(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def split_checkpoint(arrays: Mapping[str, np.ndarray]) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Separate model parameters from ``optim/``-prefixed optimizer records."""
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("optim/")}
    optim = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return params, optim
