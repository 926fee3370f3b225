"""Tensor container file format (LBTF).

Binary layout, all integers little-endian:

    magic   4 bytes  b"LBTF"
    version u16      1
    count   u32      number of entries
    entry:
        name_len u16
        name     name_len bytes, UTF-8
        dtype    u8   0=float32, 1=uint8, 2=bool
        ndim     u8
        dims     ndim x u32
        payload  row-major raw data

Round trips are bitwise lossless for all declared dtypes.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"LBTF"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.uint8): 1,
    np.dtype(np.bool_): 2,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def write_container(path: str | os.PathLike, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays to `path` atomically (temp file + rename)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)  # keeps 0-dim arrays 0-dim
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"entry name too long: {name!r}")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        if arr.dtype == np.bool_:
            blob += arr.astype(np.uint8).tobytes()
        elif arr.dtype == np.float32:
            blob += arr.astype("<f4").tobytes()
        else:
            blob += arr.tobytes()
    atomic_write_bytes(path, bytes(blob))


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a container written by `write_container`. Bitwise inverse."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4
    version, count = _unpack(data, off, "<HI")
    off += 6
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = _unpack(data, off, "<H")
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = _unpack(data, off, "<BB")
        off += 2
        if dtype_code not in _CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {dtype_code} in entry {name!r}")
        dims = _unpack(data, off, f"<{ndim}I")
        off += 4 * ndim
        dtype = _CODE_DTYPES[dtype_code]
        stored_itemsize = 4 if dtype_code == 0 else 1
        nbytes = int(np.prod(dims, dtype=np.int64)) * stored_itemsize
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated payload in entry {name!r}")
        raw = data[off : off + nbytes]
        off += nbytes
        if dtype == np.bool_:
            arr = np.frombuffer(raw, dtype=np.uint8).astype(np.bool_)
        else:
            arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
        entries[name] = arr.reshape(dims)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after last entry")
    return entries


def text_entry(text: str) -> np.ndarray:
    """Encode a string as a uint8 entry (UTF-8 bytes)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    """Decode a uint8 entry written by `text_entry`."""
    return arr.tobytes().decode("utf-8")


def _unpack(data: bytes, off: int, fmt: str):
    size = struct.calcsize(fmt)
    if off + size > len(data):
        raise ValueError("truncated container header")
    return struct.unpack_from(fmt, data, off)


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
