"""PGM (P5) and PFM raster readers/writers.

Only the subset needed by the pipeline: single-channel 8/16-bit PGM and
single-channel ('Pf') little-endian float32 PFM.  PFM rows are stored
bottom-to-top on disk, arrays in memory are always top-to-bottom.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError


def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    """Write an integer raster as binary PGM; 16-bit when maxval > 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D raster, got shape {img.shape}")
    if maxval is None:
        maxval = 255 if img.max(initial=0) <= 255 else 65535
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("PGM values out of range")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.astype(dtype).tobytes())


def _read_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header and payload
    return tokens, pos + 1


def read_pgm(path, normalize: bool = False) -> np.ndarray:
    """Read a binary PGM.  With ``normalize`` values are scaled to [0, 1]."""
    data = Path(path).read_bytes()
    try:
        tokens, offset = _read_tokens(data, 4)
    except (FormatError, IndexError) as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = width * height
    if len(data) - offset < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated PGM payload")
    img = np.frombuffer(data, dtype=dtype, count=n, offset=offset).reshape(height, width)
    if normalize:
        return img.astype(np.float64) / maxval
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def write_gray(path, image: np.ndarray, bits: int = 16) -> None:
    """Quantize a [0, 1] float image into an 8- or 16-bit PGM."""
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    write_pgm(path, q, maxval=maxval)


def write_pfm(path, raster: np.ndarray) -> None:
    arr = np.asarray(raster, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM needs a 2D raster, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        tokens, offset = _read_tokens(data, 4)
    except (FormatError, IndexError) as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    if tokens[0] != b"Pf":
        raise FormatError(f"{path}: not a single-channel PFM (magic {tokens[0]!r})")
    w, h = int(tokens[1]), int(tokens[2])
    scale = float(tokens[3])
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    if len(data) - offset < w * h * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return arr[::-1].astype(np.float32)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise OSError(f"output directory {p} is not writable")
    return p
