"""NLWT weight files.

Layout (little-endian): ``b"NLWT"``, u32 version (1), u32 tensor count, then
per tensor u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims and the
float32 values; a trailing u32 CRC32 covers every preceding byte.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NLWT"
VERSION = 1


class WeightFileError(Exception):
    pass


def dumps(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise WeightFileError("not an NLWT weight file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFileError("CRC mismatch, weight file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported NLWT version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            if name in params:
                raise WeightFileError(f"duplicate tensor name {name!r}")
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"malformed weight file: {exc}") from exc
    if off != len(body):
        raise WeightFileError("trailing bytes after last tensor")
    return params


def save_weights(params: dict, path) -> None:
    Path(path).write_bytes(dumps(params))


def load_weights(path) -> dict:
    return loads(Path(path).read_bytes())
