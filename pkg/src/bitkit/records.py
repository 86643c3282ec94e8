"""Line-delimited key/value records with stable key order."""

from __future__ import annotations

import json
import os
from typing import Any, Iterable, Iterator, Mapping, TextIO, Union

import numpy as np


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(record: Mapping[str, Any]) -> str:
    """One record as a single JSON line; keys keep insertion order."""
    return json.dumps(_plain(record), allow_nan=True)


def write_records(records: Iterable[Mapping[str, Any]], dest: Union[str, os.PathLike, TextIO]) -> None:
    if hasattr(dest, "write"):
        for rec in records:
            dest.write(dumps(rec) + "\n")
        return
    with open(dest, "w", encoding="utf-8") as f:
        write_records(records, f)


def read_records(path: Union[str, os.PathLike]) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
