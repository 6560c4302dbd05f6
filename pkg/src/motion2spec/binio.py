"""Little-endian binary framing shared by tensor files and checkpoints.

A file is ``magic | body | crc32(body)``; the body is a sequence of typed
array entries ``dtype tag (u8) | rank (u32) | dims (u64 each) | payload``.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

DTYPE_TAGS = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int32"): 3,
    np.dtype("int64"): 4,
    np.dtype("uint8"): 5,
    np.dtype("uint32"): 6,
    np.dtype("uint64"): 7,
    np.dtype("bool"): 8,
}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


def pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    try:
        tag = DTYPE_TAGS[arr.dtype]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None
    head = struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


class Reader:
    """Cursor over a verified body; every read checks it stays in bounds."""

    def __init__(self, body: bytes, what: str):
        self.body, self.pos, self.what = body, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.body):
            raise FormatError(f"{self.what}: header declares more bytes than the file holds")
        chunk = self.body[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        tag, rank = self.unpack("<BI")
        if tag not in TAG_DTYPES:
            raise FormatError(f"{self.what}: unknown dtype tag {tag}")
        if rank > 32:
            raise FormatError(f"{self.what}: implausible rank {rank}")
        dims = self.unpack(f"<{rank}Q")
        dt = TAG_DTYPES[tag].newbyteorder("<")
        count = int(np.prod(dims, dtype=object)) if rank else 1
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(dims)

    def done(self) -> None:
        if self.pos != len(self.body):
            raise FormatError(f"{self.what}: {len(self.body) - self.pos} trailing bytes after declared payload")


def frame(magic: bytes, body: bytes) -> bytes:
    return magic + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unframe(blob: bytes, magic: bytes, what: str) -> bytes:
    """Return the body after checking magic and CRC (both raise IntegrityError)."""
    if len(blob) < len(magic) + 4:
        raise IntegrityError(f"{what}: file truncated ({len(blob)} bytes)")
    if blob[: len(magic)] != magic:
        raise IntegrityError(f"{what}: bad magic {blob[:len(magic)]!r}, expected {magic!r}")
    body, (crc,) = blob[len(magic) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{what}: checksum mismatch (file corrupted or truncated)")
    return body


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
