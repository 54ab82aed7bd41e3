"""Synthetic moving-disk clips whose only label signal is the motion direction.

Disks move on a torus (wrapping at the borders) from a uniformly random start,
so every single frame has the same appearance distribution for every class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECTIONS = {"up": (0.0, -1.0), "down": (0.0, 1.0), "left": (-1.0, 0.0), "right": (1.0, 0.0)}
CLASS_NAMES = tuple(DIRECTIONS)


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    n_classes: int = 4
    frames_per_clip: int = 8
    image_size: int = 24
    radius: float = 4.0
    edge_softness: float = 1.0
    intensity_low: float = 0.5
    intensity_high: float = 1.0
    speed: float = 1.0
    noise_std: float = 0.02
    n_train: int = 64
    n_test: int = 32
    rng_seed: int = 0


@dataclass
class Split:
    clips: np.ndarray  # [N, T, 3, H, W]
    labels: np.ndarray  # [N]

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    config: SyntheticDatasetConfig


def render_clip(cfg: SyntheticDatasetConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    S, T = cfg.image_size, cfg.frames_per_clip
    dx, dy = DIRECTIONS[CLASS_NAMES[label]]
    cx, cy = rng.uniform(0.0, S, size=2)
    color = rng.uniform(cfg.intensity_low, cfg.intensity_high, size=3)
    coords = np.arange(S, dtype=np.float64)
    frames = np.empty((T, 3, S, S))
    for t in range(T):
        px = (cx + t * cfg.speed * dx) % S
        py = (cy + t * cfg.speed * dy) % S
        ddx = np.abs(coords[None, :] - px)
        ddy = np.abs(coords[:, None] - py)
        ddx = np.minimum(ddx, S - ddx)
        ddy = np.minimum(ddy, S - ddy)
        dist = np.sqrt(ddx**2 + ddy**2)
        disk = 1.0 / (1.0 + np.exp(-(cfg.radius - dist) / cfg.edge_softness))
        frames[t] = color[:, None, None] * disk[None]
    if cfg.noise_std > 0:
        frames += rng.normal(0.0, cfg.noise_std, frames.shape)
    return frames


def _make_split(cfg, n, rng):
    labels = rng.permutation(np.arange(n) % cfg.n_classes)
    clips = np.stack([render_clip(cfg, int(y), rng) for y in labels]) if n else np.empty((0,))
    return Split(clips, labels.astype(np.int64))


def synth_dataset(cfg: SyntheticDatasetConfig) -> Dataset:
    if not 1 <= cfg.n_classes <= len(DIRECTIONS):
        raise ValueError(f"n_classes must be between 1 and {len(DIRECTIONS)}")
    if 2 * cfg.radius >= cfg.image_size:
        raise ValueError("disk diameter must be smaller than the frame")
    if cfg.frames_per_clip < 1 or cfg.image_size < 4:
        raise ValueError("clips need at least one frame of at least 4x4 pixels")
    rng = np.random.default_rng(cfg.rng_seed)
    train = _make_split(cfg, cfg.n_train, rng)
    test = _make_split(cfg, cfg.n_test, rng)
    return Dataset(train, test, cfg)


def shuffle_frames(split: Split, seed: int = 0) -> Split:
    """Negative control: independently permute the frame order of every clip."""
    rng = np.random.default_rng(seed)
    clips = np.stack([c[rng.permutation(c.shape[0])] for c in split.clips])
    return Split(clips, split.labels.copy())
