"""Binary PGM (P5) frames, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class FormatError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """Return the first ``count`` header tokens and the offset of the payload."""
    toks, pos, n = [], 0, len(data)
    while len(toks) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        toks.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace before raster")
    return toks, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {data[:2]!r})")
    (magic, w, h, maxval), pos = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("non-integer header field") from exc
    if w <= 0 or h <= 0:
        raise FormatError("non-positive dimensions")
    if not 0 < maxval <= 255:
        raise FormatError(f"maxval {maxval} unsupported (must be 1..255)")
    raster = data[pos : pos + w * h]
    if len(raster) < w * h:
        raise FormatError(f"truncated payload: expected {w * h} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def encode_pgm(img, maxval: int = 255) -> bytes:
    """Quantize values in [0, 1] to ``round(x * maxval)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if not 0 < maxval <= 255:
        raise ValueError("maxval must be 1..255")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    q = np.clip(np.rint(img * maxval), 0, maxval).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(path: str | os.PathLike, img, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, maxval))
