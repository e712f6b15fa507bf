"""Binary tensor file format and PGM image previews.

NTF1 layout: 4-byte magic ``NTF1``, u8 dtype code (0 = float32,
1 = float64), u8 rank, little-endian u32 extents, then the raw
little-endian values in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTF1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Raised for bad magic, truncation, or malformed headers."""


def dump_ntf(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 0 and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def parse_ntf(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at `offset`; returns (array, next offset)."""
    if len(buf) < offset + 6:
        raise FormatError("truncated NTF1 header")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated NTF1 extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _DTYPE_CODES[code]
    count = 1
    for s in shape:
        count *= s
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated NTF1 payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arr, pos + nbytes


def write_ntf(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dump_ntf(arr))


def read_ntf(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = parse_ntf(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# PGM previews (binary P5, 8-bit)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a [0,1] grayscale image (2-d array) as binary PGM."""
    if img.ndim != 2:
        raise ValueError(f"PGM preview expects a 2-d image, got shape {img.shape}")
    q = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 PGM back to a float image in [0,1]."""
    buf = Path(path).read_bytes()
    stream = io.BytesIO(buf)
    if stream.readline().strip() != b"P5":
        raise FormatError("not a binary PGM file")

    def next_token():
        tok = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise FormatError("truncated PGM header")
            if ch.isspace():
                if tok:
                    return tok
                continue
            if ch == b"#":
                stream.readline()
                continue
            tok += ch

    w = int(next_token())
    h = int(next_token())
    maxval = int(next_token())
    data = stream.read(w * h)
    if len(data) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float32) / maxval
