"""Versioned binary parameter container.

Layout (all integers little-endian u32)::

    b"RFK1"
    group count
    per group: name length, UTF-8 name bytes, rank, extents..., float64 LE values (C order)

Values are stored as raw IEEE-754 bit patterns, so round-trips are bit-exact,
including negative zero, denormals and NaN payloads.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"RFK1"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode(params: dict) -> bytes:
    out = [MAGIC, _U32.pack(len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(arr.ndim))
        out.extend(_U32.pack(n) for n in arr.shape)
        out.append(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(blob[:4])!r}")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U32.unpack_from(blob, pos)
        pos += 4
        return v

    params = {}
    for _ in range(u32()):
        n = u32()
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = bytes(blob[pos : pos + n]).decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated values for {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last group")
    return params


def save(path: str | os.PathLike, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(params))


def load(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())
