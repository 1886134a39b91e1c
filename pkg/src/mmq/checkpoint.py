"""Versioned parameter checkpoints.

Layout: an ASCII header, one record per line, terminated by ``end``::

    MMQ-CHECKPOINT 1
    meta feature_dim 64
    param conv1.w 64,1,3,3 float32 0
    end

followed by the payload: little-endian float32 arrays concatenated in header
order. Offsets are relative to the first payload byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError
from .fileio import atomic_write_bytes

MAGIC = "MMQ-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f4")


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in (meta or {}).items():
        text = str(value)
        if any(ch.isspace() for ch in str(key)) or "\n" in text:
            raise DataError(f"checkpoint meta entry {key!r} is not header-safe")
        lines.append(f"meta {key} {text}")
    chunks, offset = [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype=_DTYPE)
        if any(ch.isspace() for ch in name):
            raise DataError(f"parameter name {name!r} contains whitespace")
        shape = ",".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"param {name} {shape} float32 {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise DataError(f"{path}: checkpoint header not terminated")
    header = raw[:end].decode("ascii").split("\n")
    payload = raw[end + len(b"\nend\n"):]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise DataError(f"{path}: not an MMQ checkpoint")
    if int(magic[1]) != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {magic[1]}")
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line_no, line in enumerate(header[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "param":
            name, shape_text, dtype, offset = rest.split(" ")
            if dtype != "float32":
                raise DataError(f"{path}:{line_no}: unsupported dtype {dtype}")
            shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split(","))
            count = int(np.prod(shape)) if shape else 1
            start = int(offset)
            if start + count * 4 > len(payload):
                raise DataError(f"{path}:{line_no}: payload too short for {name}")
            params[name] = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=start) \
                .astype(np.float32).reshape(shape)
        else:
            raise DataError(f"{path}:{line_no}: unknown header record {kind!r}")
    return params, meta
