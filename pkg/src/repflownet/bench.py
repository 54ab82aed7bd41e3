"""Wall-clock benchmark of the representation-flow forward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .repflow import FlowParams, rep_flow_forward

CSV_HEADER = "resolution,channels,iters,median_s,iqr_s"
MIN_RUNS = 5


@dataclass(frozen=True)
class BenchResult:
    resolution: int
    channels: int
    iters: int
    durations: tuple
    warmup: int

    @property
    def descriptor(self) -> str:
        return f"{self.resolution}x{self.resolution}x{self.channels}@{self.iters}"

    @property
    def median(self) -> float:
        return float(np.median(self.durations))

    @property
    def iqr(self) -> float:
        q1, q3 = np.percentile(self.durations, [25, 75])
        return float(q3 - q1)

    def csv_row(self) -> str:
        return f"{self.resolution},{self.channels},{self.iters},{self.median:.6g},{self.iqr:.6g}"


def bench_flow(resolution: int, channels: int, iters: int, runs: int = MIN_RUNS, warmup: int = 1,
               seed: int = 0, clock=time.perf_counter) -> BenchResult:
    """Time ``rep_flow`` between two random ``[channels, r, r]`` feature maps."""
    if runs < MIN_RUNS or warmup < 1:
        raise ValueError(f"need at least {MIN_RUNS} timed runs and one warm-up run")
    if resolution < 3 or channels < 1 or iters < 1:
        raise ValueError("resolution >= 3, channels >= 1 and iters >= 1 required")
    rng = np.random.default_rng(seed)
    F1 = rng.random((channels, resolution, resolution))
    F2 = rng.random((channels, resolution, resolution))
    params = FlowParams(n_iters=iters)
    durations = []
    for k in range(warmup + runs):
        t0 = clock()
        rep_flow_forward(F1, F2, params, record=False)
        dt = clock() - t0
        if k >= warmup:
            durations.append(dt)
    return BenchResult(resolution, channels, iters, tuple(durations), warmup)


def bench_grid(resolutions, channels, iters, runs: int = MIN_RUNS, warmup: int = 1):
    """Serial sweep in row-major order over (resolution, channels, iters)."""
    return [bench_flow(r, c, n, runs, warmup) for r in resolutions for c in channels for n in iters]


def to_csv(results) -> str:
    return "\n".join([CSV_HEADER, *(r.csv_row() for r in results)]) + "\n"
