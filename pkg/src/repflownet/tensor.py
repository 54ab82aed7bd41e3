"""Dense-array substrate shared by every other module.

Arrays are plain ``numpy.ndarray`` values in float64 unless a caller opts into
float32. Convolutions are cross-correlations (no kernel flip) with explicit
zero padding. Every public operation rejects NaN/Inf in its result.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    return check_finite(arr)


def same_padding(kh: int, kw: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding that preserves spatial shape."""
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"shape-preserving padding needs odd kernel extents, got {kh}x{kw}")
    return (kh // 2, kh // 2, kw // 2, kw // 2)


def _normalize_pad(pad, kh: int, kw: int) -> tuple[int, int, int, int]:
    if pad == "same":
        return same_padding(kh, kw)
    if isinstance(pad, (int, np.integer)):
        if pad < 0:
            raise ValueError("padding must be non-negative")
        return (int(pad),) * 4
    pad = tuple(int(p) for p in pad)
    if len(pad) != 4 or min(pad) < 0:
        raise ValueError(f"bad padding {pad!r}")
    return pad


def _pad_hw(x: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    t, b, l, r = pad
    if not any(pad):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    return np.pad(x, widths)


def conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None, pad="same") -> np.ndarray:
    """Multi-channel 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, kh, kw]``. Output spatial extent is ``H + t + b - kh + 1``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    padding = _normalize_pad(pad, kh, kw)
    cols = sliding_window_view(_pad_hw(x, padding), (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d output")
    return out[0] if squeeze else out


def conv2d_grads(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, pad="same"):
    """Gradients of ``conv2d(x, w, b, pad)`` given the upstream gradient.

    Returns ``(grad_x, grad_w, grad_b)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x, grad_out = x[None], grad_out[None]
    kh, kw = w.shape[2:]
    t, b, l, r = _normalize_pad(pad, kh, kw)
    H, W = x.shape[2:]
    cols = sliding_window_view(_pad_hw(x, (t, b, l, r)), (kh, kw), axis=(2, 3))
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # full correlation of the upstream gradient with the flipped, transposed kernel
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gcols = sliding_window_view(_pad_hw(grad_out, (kh - 1, kh - 1, kw - 1, kw - 1)), (kh, kw), axis=(2, 3))
    grad_xp = np.tensordot(gcols, w_t, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    grad_x = np.ascontiguousarray(grad_xp[:, :, t : t + H, l : l + W])
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def filter2d(z: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Shape-preserving cross-correlation of every trailing ``[H, W]`` plane with one odd kernel.

    Accumulation runs over kernel taps in row-major order, so the result is
    bit-stable for identical inputs.
    """
    kh, kw = k.shape
    t, _, l, _ = same_padding(kh, kw)
    H, W = z.shape[-2:]
    zp = _pad_hw(z, (t, t, l, l))
    out = np.zeros(z.shape, dtype=np.result_type(z, k))
    for i in range(kh):
        for j in range(kw):
            kij = k[i, j]
            if kij != 0.0:
                out += kij * zp[..., i : i + H, j : j + W]
    return out


def filter2d_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`filter2d` with respect to its input."""
    return filter2d(g, k[::-1, ::-1])


def filter2d_kernel_grad(z: np.ndarray, g: np.ndarray, kshape: tuple[int, int]) -> np.ndarray:
    """Gradient of ``sum(g * filter2d(z, k))`` with respect to ``k``."""
    kh, kw = kshape
    t, _, l, _ = same_padding(kh, kw)
    H, W = z.shape[-2:]
    zp = _pad_hw(z, (t, t, l, l))
    out = np.empty(kshape)
    for i in range(kh):
        for j in range(kw):
            out[i, j] = np.sum(g * zp[..., i : i + H, j : j + W])
    return out


def map_(x: np.ndarray, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    out = np.asarray(f(x), dtype=np.result_type(x, np.float32))
    if out.shape != x.shape:
        raise ValueError("map function changed the shape")
    return check_finite(out, "map output")


def zip_(a: np.ndarray, b: np.ndarray, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(np.asarray(f(a, b)), "zip output")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_REDUCERS = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.max,
}


def reduce(x: np.ndarray, axes: int | Sequence[int] | None = None, kind: str = "sum"):
    """Reduce over ``axes`` (all axes when ``None``).

    ``argmax`` takes a single axis (or the flattened array) and breaks ties
    toward the lowest index.
    """
    if kind == "argmax":
        if x.size == 0:
            raise ValueError("argmax over an empty axis")
        if axes is not None and not isinstance(axes, (int, np.integer)):
            raise ValueError("argmax reduces a single axis")
        return np.argmax(x, axis=axes)
    if kind not in _REDUCERS:
        raise ValueError(f"unknown reduction {kind!r}")
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    ax = tuple(range(x.ndim)) if axes is None else tuple(a % x.ndim for a in axes)
    if kind != "sum" and any(x.shape[a] == 0 for a in ax):
        raise ValueError(f"{kind} over an empty axis")
    return check_finite(np.asarray(_REDUCERS[kind](x, axis=ax)), f"{kind} output")
