"""Checksummed binary container for named float tensors.

Layout (all integers little-endian):

    magic   b"SOWA"
    version u16
    count   u32
    entry*  name_len u16, name utf-8, dtype u8 (0 = float32), rank u8,
            extents u32 each, payload_offset u64 (relative to payload start)
    payload tensors as raw little-endian float32, each 64-byte aligned;
            the payload section itself starts on a 64-byte file boundary
    crc32   u32 over the full payload section

Payload floats are normatively 32-bit; ``write`` casts wider inputs down.
"""

from __future__ import annotations

import struct
import zlib
from typing import Dict, Mapping

import numpy as np

from .errors import (
    ArchiveChecksumError,
    ArchiveError,
    ArchiveNameError,
    ArchiveVersionError,
    UsageError,
)

MAGIC = b"SOWA"
VERSION = 1
ALIGNMENT = 64
_DTYPE_FLOAT32 = 0


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def archive_write(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors to ``path``; names must be unique and data finite.

    Scalars are stored as shape (1,): entries always have rank >= 1.
    """
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise ArchiveNameError("duplicate tensor names in archive write")
    arrays = {}
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
        if not np.all(np.isfinite(arr)):
            raise UsageError(f"tensor {name!r} contains non-finite values")
        arrays[name] = arr

    header = bytearray()
    header += MAGIC
    header += struct.pack("<HI", VERSION, len(names))
    offset = 0
    offsets = {}
    for name in names:
        arr = arrays[name]
        offsets[name] = offset
        encoded = name.encode("utf-8")
        header += struct.pack("<H", len(encoded)) + encoded
        header += struct.pack("<BB", _DTYPE_FLOAT32, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", offset)
        offset = _align(offset + arr.nbytes)

    payload_start = _align(len(header))
    payload = bytearray(offset)
    for name in names:
        arr = arrays[name]
        start = offsets[name]
        payload[start : start + arr.nbytes] = arr.astype("<f4").tobytes()

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (payload_start - len(header)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload))))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ArchiveError("archive truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def archive_read(path) -> Dict[str, np.ndarray]:
    """Read all tensors; verifies magic, version, structure, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.read(4) != MAGIC:
        raise ArchiveError(f"bad magic bytes in {path}")
    (version, count) = reader.unpack("<HI")
    if version != VERSION:
        raise ArchiveVersionError(f"unsupported archive version {version}")

    entries = []
    payload_size = 0
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.read(name_len).decode("utf-8")
        dtype_code, rank = reader.unpack("<BB")
        if dtype_code != _DTYPE_FLOAT32:
            raise ArchiveError(f"unknown dtype code {dtype_code} for {name!r}")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        (offset,) = reader.unpack("<Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if rank else 4
        entries.append((name, shape, offset, nbytes))
        payload_size = max(payload_size, _align(offset + nbytes))

    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        raise ArchiveNameError("duplicate tensor names in archive")

    payload_start = _align(reader.pos)
    if len(blob) < payload_start + payload_size + 4:
        raise ArchiveError("archive truncated")
    payload = blob[payload_start : payload_start + payload_size]
    (recorded,) = struct.unpack(
        "<I", blob[payload_start + payload_size : payload_start + payload_size + 4]
    )
    if zlib.crc32(payload) != recorded:
        raise ArchiveChecksumError(f"payload checksum mismatch in {path}")

    out = {}
    for name, shape, offset, nbytes in entries:
        raw = payload[offset : offset + nbytes]
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out
