"""Binary PPM (P6, 8-bit) frame I/O.

Pixel bytes map linearly onto [0, 1]: 0 -> 0.0, 255 -> 1.0. Frames are
returned as float32 arrays of shape (3, H, W).
"""

from __future__ import annotations

import os

import numpy as np

from .container import atomic_write_bytes


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write a (3, H, W) float array in [0, 1] as binary PPM, atomically."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got shape {tuple(pixels.shape)}")
    h, w = pixels.shape[1], pixels.shape[2]
    quantized = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    # PPM stores pixels interleaved RGB, row-major
    body = quantized.transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, header + body)


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM (magic {data[:2]!r})")
    fields, off = _read_header_fields(data, 2, count=3)
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: bad dimensions {w}x{h}")
    body = data[off : off + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel payload")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32)) / 255.0


def _read_header_fields(data: bytes, off: int, count: int) -> tuple[list[bytes], int]:
    """Parse whitespace-separated header tokens, skipping '#' comments."""
    fields: list[bytes] = []
    while len(fields) < count:
        if off >= len(data):
            raise ValueError("malformed PPM header: unexpected end of file")
        ch = data[off : off + 1]
        if ch.isspace():
            off += 1
        elif ch == b"#":
            while off < len(data) and data[off : off + 1] not in (b"\n", b"\r"):
                off += 1
        else:
            start = off
            while off < len(data) and not data[off : off + 1].isspace():
                off += 1
            token = data[start:off]
            if not token.isdigit():
                raise ValueError(f"malformed PPM header: token {token!r}")
            fields.append(token)
    # exactly one whitespace byte separates the header from the payload
    if off >= len(data) or not data[off : off + 1].isspace():
        raise ValueError("malformed PPM header: missing separator before payload")
    return fields, off + 1
