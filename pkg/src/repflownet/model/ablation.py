"""Sweeps over flow-layer count and solver iteration count."""

from __future__ import annotations

import dataclasses

from .data import Dataset
from .training import evaluate, train_pipeline
from .twostream import ModelConfig, TwoStreamModel

SWEEPS = {"flow_layers": (0, 1, 2, 3), "n_iters": (10, 20, 30, 50)}


def ablate(template: ModelConfig, dimension: str, dataset: Dataset, stage_cfgs, seed: int = 0, values=None):
    """Train and evaluate one model per setting; returns ``[(setting, accuracy), ...]``.

    Every setting starts from the same seed. Because each stream has its own
    generator, the RGB weights are identical across settings, and the
    0-layer row is exactly the RGB-only accuracy.
    """
    if dimension not in SWEEPS:
        raise ValueError(f"unknown sweep dimension {dimension!r}; expected one of {sorted(SWEEPS)}")
    values = SWEEPS[dimension] if values is None else tuple(values)
    if len(set(values)) != len(values):
        raise ValueError("duplicate sweep settings")
    rows = []
    for value in values:
        cfg = dataclasses.replace(template, **{dimension: value})
        model = TwoStreamModel.initialize(cfg, seed)
        model, _ = train_pipeline(model, stage_cfgs, dataset.train)
        stream = "rgb" if cfg.flow_layers == 0 else "fused"
        rows.append((value, evaluate(model, dataset.test, stream)))
    return rows
