"""Binary Netpbm readers/writers: P6 colour images, P5 grey maps (8 or 16 bit)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import LoadError


def _read_header(raw: bytes, path) -> tuple[bytes, list[int], int]:
    """Magic, the three header integers, and the offset of the pixel payload."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated Netpbm header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the payload
    try:
        nums = [int(t) for t in tokens[1:]]
    except ValueError as exc:
        raise LoadError(f"{path}: malformed Netpbm header") from exc
    return tokens[0], nums, pos


def _payload(raw: bytes, pos: int, count: int, maxval: int, path) -> np.ndarray:
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = count * dtype.itemsize
    if len(raw) - pos < need:
        raise LoadError(f"{path}: expected {need} payload bytes, found {len(raw) - pos}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=pos)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _read_header(raw, path)
    if magic != b"P5":
        raise LoadError(f"{path}: not a binary PGM (magic {magic!r})")
    data = _payload(raw, pos, w * h, maxval, path).reshape(h, w)
    return data.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, arr, maxval: int | None = None) -> None:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got {a.shape}")
    if maxval is None:
        maxval = 65535 if a.max(initial=0) > 255 or a.dtype == np.uint16 else 255
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError(f"values outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + a.astype(dtype).tobytes())


def read_ppm(path) -> np.ndarray:
    """Colour image as ``[3, H, W]`` floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _read_header(raw, path)
    if magic != b"P6":
        raise LoadError(f"{path}: not a binary PPM (magic {magic!r})")
    data = _payload(raw, pos, w * h * 3, maxval, path).reshape(h, w, 3)
    return np.transpose(data.astype(np.float64) / maxval, (2, 0, 1))


def write_ppm(path, img) -> None:
    """``[3, H, W]`` floats in [0, 1] -> 8-bit P6."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"PPM needs a [3, H, W] array, got {a.shape}")
    q = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P6\n{a.shape[2]} {a.shape[1]}\n255\n".encode()
    Path(path).write_bytes(header + np.transpose(q, (1, 2, 0)).tobytes())
