"""Middlebury color-wheel rendering of flow fields as binary PPM (P6)."""

from __future__ import annotations

import numpy as np

# hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
SEGMENTS = (("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6))


def color_wheel() -> np.ndarray:
    """``[55, 3]`` RGB table in [0, 255] running once around the hue circle."""
    ry, yg, gc, cb, bm, mr = (n for _, n in SEGMENTS)
    rows = []
    ramp = lambda n: np.floor(255 * np.arange(n) / n)  # noqa: E731
    rows.append(np.stack([np.full(ry, 255.0), ramp(ry), np.zeros(ry)], 1))
    rows.append(np.stack([255 - ramp(yg), np.full(yg, 255.0), np.zeros(yg)], 1))
    rows.append(np.stack([np.zeros(gc), np.full(gc, 255.0), ramp(gc)], 1))
    rows.append(np.stack([np.zeros(cb), 255 - ramp(cb), np.full(cb, 255.0)], 1))
    rows.append(np.stack([ramp(bm), np.zeros(bm), np.full(bm, 255.0)], 1))
    rows.append(np.stack([np.full(mr, 255.0), np.zeros(mr), 255 - ramp(mr)], 1))
    return np.concatenate(rows)


def wheel_position(u, v) -> np.ndarray:
    """Fractional index into :func:`color_wheel` for flow angle ``atan2(v, u)``."""
    n = len(color_wheel())
    a = np.arctan2(-np.asarray(v, dtype=np.float64), -np.asarray(u, dtype=np.float64)) / np.pi
    return (a + 1) / 2 * (n - 1)


def flow_to_rgb(flow, max_magnitude="auto") -> np.ndarray:
    """``[2, H, W]`` flow -> ``[H, W, 3]`` uint8 image.

    Hue follows the flow angle, saturation the magnitude divided by
    ``max_magnitude`` (``"auto"`` uses the largest magnitude present).
    Zero flow is white.
    """
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 2:
        raise ValueError(f"flow must be [2, H, W], got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("flow contains non-finite values")
    u, v = f
    mag = np.hypot(u, v)
    if max_magnitude == "auto":
        scale = float(mag.max()) if mag.size else 0.0
    else:
        scale = float(max_magnitude)
        if not np.isfinite(scale) or scale <= 0:
            raise ValueError("max_magnitude must be positive")
    rad = mag / scale if scale > 0 else np.zeros_like(mag)

    wheel = color_wheel()
    n = len(wheel)
    fk = wheel_position(u, v)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    w = fk - k0
    img = np.empty(u.shape + (3,))
    for ch in range(3):
        col = ((1 - w) * wheel[k0, ch] + w * wheel[k1, ch]) / 255.0
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., ch] = np.floor(255 * col)
    return img.astype(np.uint8)


def flow_to_ppm(flow, max_magnitude="auto") -> bytes:
    img = flow_to_rgb(flow, max_magnitude)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()
