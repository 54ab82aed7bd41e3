"""Stage-wise training, evaluation and the optimizers used by both streams."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..tensor import NonFiniteError
from .data import Split
from .twostream import TwoStreamModel, cross_entropy, fuse

STAGES = ("rgb_stage1", "rgb_stage2", "flow", "fusion")

# parameter-name prefixes that receive updates in each stage
TRAINABLE_PREFIXES = {
    "rgb_stage1": ("rgb.convlstm.", "rgb.classifier."),
    "rgb_stage2": ("rgb.",),
    "flow": ("flow.",),
    "fusion": ("fusion.",),
}

POSITIVE_SUFFIXES = (".tau", ".theta", ".lambda_")
POSITIVE_FLOOR = 1e-8


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "rgb_stage2"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    lr_decay_every: int = 0
    optimizer: str = "adam"
    freeze: tuple = ()
    clip_length: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)
        if self.lr_decay_every:
            lr *= self.lr_gamma ** (epoch // self.lr_decay_every)
        return lr

    def is_trainable(self, name: str) -> bool:
        if any(name.startswith(f) for f in self.freeze):
            return False
        return any(name.startswith(p) for p in TRAINABLE_PREFIXES[self.stage])


# settings stated for the full-scale experiments; far too long for desk-scale runs
FULL_SCALE_PROFILE = {
    "rgb_stage1": TrainConfig("rgb_stage1", epochs=200, batch_size=32, learning_rate=1e-3,
                              lr_milestones=(25, 75, 150), optimizer="adam", clip_length=25),
    "rgb_stage2": TrainConfig("rgb_stage2", epochs=150, batch_size=32, learning_rate=1e-4,
                              lr_milestones=(25, 75), optimizer="adam", clip_length=25),
    "flow": TrainConfig("flow", epochs=750, batch_size=16, learning_rate=1e-3, lr_gamma=0.5,
                        optimizer="sgd_momentum", clip_length=16),
    "fusion": TrainConfig("fusion", epochs=250, batch_size=32, learning_rate=1.0, lr_gamma=0.1,
                          lr_decay_every=1, optimizer="sgd_momentum", clip_length=16),
}


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGDMomentum:
    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.buf = {}

    def step(self, params: dict, grads: dict, lr: float):
        for k, g in grads.items():
            b = self.buf.get(k, 0.0) * self.momentum + g
            self.buf[k] = b
            params[k] = params[k] - lr * b


def _stage_stream(stage: str) -> str:
    return "rgb" if stage.startswith("rgb") else stage


def stage_loss(model: TwoStreamModel, v: dict, clip, label: int, stage: str):
    stream = _stage_stream(stage)
    if stream == "rgb":
        probs = ad.softmax(model.rgb_logits(clip, v))
    elif stream == "flow":
        probs = ad.softmax(model.flow_logits(clip, v))
    else:
        probs = fuse(model.rgb_logits(clip, v), model.flow_logits(clip, v), (v["fusion.w"], v["fusion.b"]))
    return cross_entropy(probs, label), probs


def _clip_frames(clips: np.ndarray, length: int) -> np.ndarray:
    T = clips.shape[1]
    if length >= T:
        return clips
    idx = np.round(np.linspace(0, T - 1, length)).astype(int)
    return clips[:, idx]


def train(model: TwoStreamModel, cfg: TrainConfig, data: Split, log=None):
    """Minimize mean cross-entropy for one stage; returns ``(model, metrics)``.

    ``metrics`` holds one dict per epoch with ``stage, epoch, loss, accuracy``.
    Frozen parameters are never touched, so they keep their exact bits.
    """
    if len(data) == 0:
        raise ValueError("empty training split")
    model = model.copy()
    clips = _clip_frames(data.clips, cfg.clip_length)
    labels = data.labels
    names = [k for k in model.params if cfg.is_trainable(k)]
    if not names:
        raise ValueError(f"no trainable parameters for stage {cfg.stage!r}")
    opt = Adam() if cfg.optimizer == "adam" else SGDMomentum()
    rng = np.random.default_rng(cfg.rng_seed)
    fusion_cache = _stream_logits(model, clips) if cfg.stage == "fusion" else None
    metrics = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(labels))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            v = model.vars(trainable=cfg.is_trainable)
            losses = []
            for i in batch:
                if fusion_cache is not None:
                    r, f = fusion_cache[i]
                    probs = fuse(ad.Var(r), ad.Var(f), (v["fusion.w"], v["fusion.b"]))
                    loss = cross_entropy(probs, int(labels[i]))
                else:
                    try:
                        loss, probs = stage_loss(model, v, clips[i], int(labels[i]), cfg.stage)
                    except NonFiniteError as exc:
                        raise TrainingDivergedError(f"stage {cfg.stage} epoch {epoch}: {exc}") from exc
                if not np.all(np.isfinite(probs.value)):
                    raise TrainingDivergedError(f"non-finite probabilities in stage {cfg.stage} epoch {epoch}")
                losses.append(loss)
                correct += int(np.argmax(probs.value) == labels[i])
            batch_loss = ad.mean(ad.stack(losses))
            if not np.isfinite(batch_loss.value):
                raise TrainingDivergedError(f"non-finite loss in stage {cfg.stage} epoch {epoch}")
            batch_loss.backward()
            grads = {k: v[k].grad if v[k].grad is not None else np.zeros_like(model.params[k]) for k in names}
            opt.step(model.params, grads, lr)
            for k in names:
                if not np.all(np.isfinite(model.params[k])):
                    raise TrainingDivergedError(f"parameter {k} became non-finite in stage {cfg.stage} epoch {epoch}")
                if k.endswith(POSITIVE_SUFFIXES):
                    model.params[k] = np.maximum(model.params[k], POSITIVE_FLOOR)
            total += float(batch_loss.value) * len(batch)
        row = dict(stage=cfg.stage, epoch=epoch, loss=total / len(labels), accuracy=correct / len(labels))
        metrics.append(row)
        if log is not None:
            log(row)
    return model, metrics


def _stream_logits(model: TwoStreamModel, clips) -> list:
    return [(model.rgb_logits(c).value, model.flow_logits(c).value) for c in clips]


def predictions(model: TwoStreamModel, data: Split, stream: str = "fused") -> np.ndarray:
    return np.array([int(np.argmax(model.predict_probs(c, stream))) for c in data.clips], dtype=np.int64)


def evaluate(model: TwoStreamModel, data: Split, stream: str = "fused") -> float:
    """Fraction of clips whose argmax prediction matches the label."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    hits = int(np.sum(predictions(model, data, stream) == data.labels))
    return hits / len(data)


def train_pipeline(model: TwoStreamModel, stage_cfgs, data: Split, log=None):
    """Run several stages in order, skipping flow/fusion stages for RGB-only models."""
    metrics = []
    for cfg in stage_cfgs:
        if model.config.flow_layers == 0 and cfg.stage in ("flow", "fusion"):
            continue
        model, m = train(model, cfg, data, log)
        metrics.extend(m)
    return model, metrics


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, rng_seed=seed)


def desk_profile(seed: int = 0, epochs=None) -> list:
    """Short schedule that fits the synthetic dataset in seconds per stage.

    The flow stage uses Adam at a higher rate than the full-scale SGD
    schedule; with few epochs SGD barely moves the tiny flow responses.
    """
    e = dict(rgb_stage1=5, rgb_stage2=10, flow=10, fusion=10)
    if epochs is not None:
        e.update(epochs if isinstance(epochs, dict) else dict.fromkeys(e, int(epochs)))
    return [
        TrainConfig("rgb_stage1", epochs=e["rgb_stage1"], batch_size=8, learning_rate=1e-2, rng_seed=seed),
        TrainConfig("rgb_stage2", epochs=e["rgb_stage2"], batch_size=8, learning_rate=1e-3, rng_seed=seed),
        TrainConfig("flow", epochs=e["flow"], batch_size=8, learning_rate=1e-2, rng_seed=seed),
        TrainConfig("fusion", epochs=e["fusion"], batch_size=8, learning_rate=1e-2, rng_seed=seed),
    ]
