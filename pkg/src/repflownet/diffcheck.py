"""Central finite differences as an independent check on analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError

DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7


@dataclass(frozen=True)
class GradReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    n_params: int
    passed: bool
    failing: tuple[int, ...] = ()

    def __bool__(self):
        return self.passed


_branch_log = None


@contextlib.contextmanager
def branch_trace():
    """Collect the branch decisions that piecewise operations report via :func:`note_branch`."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(decision) -> None:
    """Record a discrete decision (mask, index) while a trace is active; no-op otherwise."""
    if _branch_log is not None:
        a = np.asarray(decision)
        _branch_log.append((a.shape, a.tobytes()))


def _eval(f, x):
    with branch_trace() as log:
        val = float(f(x))
    if not np.isfinite(val):
        raise NonFiniteError("objective is not finite near the evaluation point")
    return val, log


def numeric_gradient(f, at, h: float = DEFAULT_STEP, *, return_kinks: bool = False):
    """Central-difference gradient of scalar ``f`` at array ``at``.

    With ``return_kinks`` also returns a boolean mask of coordinates where ``f``
    is not smooth within the step: either the forward and backward one-sided
    differences disagree by more than ten times the central estimate, or a
    piecewise operation inside ``f`` took a different branch at ``x +- h`` than
    at ``x`` (see :func:`note_branch`).
    """
    x = np.array(at, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    kinks = np.zeros(flat.shape, dtype=bool)
    f0, b0 = _eval(f, x) if return_kinks else (None, None)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, bp = _eval(f, x)
        flat[i] = orig - h
        fm, bm = _eval(f, x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
        if return_kinks:
            d_plus, d_minus = (fp - f0) / h, (f0 - fm) / h
            kinks[i] = abs(d_plus - d_minus) > 10.0 * max(abs(grad[i]), 1e-6) or bp != b0 or bm != b0
    grad = grad.reshape(x.shape)
    if return_kinks:
        return grad, kinks.reshape(x.shape)
    return grad


def gradcheck(analytic, numeric, rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> GradReport:
    """Compare two gradients coordinatewise: pass iff |a-n| <= atol + rtol*max(|a|,|n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    a, n = a.reshape(-1), n.reshape(-1)
    if a.size == 0:
        return GradReport(0.0, 0.0, -1, 0, True)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = diff / np.maximum(scale, 1e-8)
    bad = diff > atol + rtol * scale
    worst = int(np.argmax(bad * (1.0 + rel))) if bad.any() else int(np.argmax(rel))
    return GradReport(
        max_abs_err=float(diff.max()),
        max_rel_err=float(rel.max()),
        worst_index=worst,
        n_params=int(a.size),
        passed=not bool(bad.any()),
        failing=tuple(int(i) for i in np.flatnonzero(bad)),
    )
