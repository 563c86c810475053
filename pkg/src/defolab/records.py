"""
Binary tensor-record container shared by encoder packs, dataset blobs and
checkpoints.

Layout (little-endian)::

    magic         8 bytes, e.g. b"DFOPACK1"
    version       u32
    meta_len      u32, then meta_len bytes of UTF-8 ``key = value`` lines
    n_tensors     u32
    per tensor:   u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
                  prod(dims) x f64 raw values
    crc32         u32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

FORMAT_VERSION = 1


class RecordError(ValueError):
    """Malformed or incompatible record file."""


class ChecksumError(RecordError):
    pass


class VersionError(RecordError):
    pass


class TruncatedError(RecordError):
    pass


def format_meta(meta: Dict[str, str]) -> str:
    lines = []
    for key, value in meta.items():
        value = str(value)
        if "\n" in value or "=" in key:
            raise RecordError(f"meta entry {key!r} cannot be written as a single line")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_meta(text: str) -> Dict[str, str]:
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RecordError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def encode(magic: bytes, meta: Dict[str, str], tensors: Dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise RecordError("magic must be 8 bytes")
    meta_bytes = format_meta(meta).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("file ends before the record is complete")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, magic: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    if len(buf) < 8 + 8 + 4 + 4:
        raise TruncatedError("file too short to hold a record header")
    if buf[:8] != magic:
        raise RecordError(f"bad magic {buf[:8]!r}, expected {magic!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        try:
            _parse(buf)
        except TruncatedError:
            raise
        except Exception:
            pass
        raise ChecksumError("CRC32 mismatch; file is corrupted")
    meta, tensors, end = _parse(body)
    if end != len(body):
        raise RecordError("trailing bytes after the last tensor record")
    return meta, tensors


def _parse(body: bytes):
    r = _Reader(body)
    r.take(8)
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"record format version {version}, expected {FORMAT_VERSION}")
    meta = parse_meta(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    return meta, tensors, r.pos


def write(path, magic: bytes, meta: Dict[str, str], tensors: Dict[str, np.ndarray]) -> int:
    """Write a record file and return its CRC32."""
    data = encode(magic, meta, tensors)
    Path(path).write_bytes(data)
    return zlib.crc32(data)


def read(path, magic: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
