"""Middlebury ``.flo`` flow files.

``PIEH`` magic, width and height as little-endian int32, then row-major
interleaved ``(u, v)`` as little-endian float32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PIEH"
MAGIC_FLOAT = 202021.25
_INT32_MAX = 2**31 - 1


class FloError(ValueError):
    pass


@dataclass
class FloFile:
    width: int
    height: int
    flow: np.ndarray  # [2, H, W] float32

    @classmethod
    def from_flow(cls, flow) -> "FloFile":
        f = np.asarray(flow)
        if f.ndim != 3 or f.shape[0] != 2:
            raise FloError(f"flow must be [2, H, W], got {f.shape}")
        return cls(int(f.shape[2]), int(f.shape[1]), f.astype(np.float32))


def encode_flo(flo: FloFile | np.ndarray) -> bytes:
    if not isinstance(flo, FloFile):
        flo = FloFile.from_flow(flo)
    w, h = flo.width, flo.height
    if not (0 < w <= _INT32_MAX and 0 < h <= _INT32_MAX):
        raise FloError(f"dimensions {w}x{h} do not fit a positive int32")
    f = np.asarray(flo.flow, dtype=np.float32)
    if f.shape != (2, h, w):
        raise FloError(f"flow shape {f.shape} does not match {w}x{h}")
    if not np.all(np.isfinite(f)):
        raise FloError("flow contains non-finite values")
    body = np.ascontiguousarray(np.moveaxis(f, 0, -1)).astype("<f4", copy=False).tobytes()
    return MAGIC + struct.pack("<ii", w, h) + body


def decode_flo(data: bytes) -> FloFile:
    if data[:4] != MAGIC:
        raise FloError(f"bad .flo magic {bytes(data[:4])!r}")
    if len(data) < 12:
        raise FloError("truncated .flo header")
    w, h = struct.unpack_from("<ii", data, 4)
    if w <= 0 or h <= 0:
        raise FloError(f"invalid dimensions {w}x{h}")
    n = 2 * w * h
    if len(data) != 12 + 4 * n:
        raise FloError(f"expected {12 + 4 * n} bytes for {w}x{h}, got {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", count=n, offset=12).astype(np.float32).reshape(h, w, 2)
    return FloFile(w, h, np.ascontiguousarray(np.moveaxis(uv, -1, 0)))


def write_flo(path: str | os.PathLike, flo: FloFile | np.ndarray) -> None:
    data = encode_flo(flo)
    with open(path, "wb") as fh:
        fh.write(data)


def read_flo(path: str | os.PathLike) -> FloFile:
    with open(path, "rb") as fh:
        return decode_flo(fh.read())
