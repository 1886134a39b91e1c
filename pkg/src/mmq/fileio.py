"""Atomic file writes and the portable graymap image format."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0,1] grayscale image as an 8-bit binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DataError(f"PGM holds one channel, got shape {img.shape}")
        img = img[0]
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file into a float32 array of shape (1, H, W) in [0,1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return (pixels.astype(np.float32) / np.float32(255.0))[None]
