"""Desk-scale two-stream classifier: RGB attention stream, flow stream, decision fusion.

All learnable tensors live in one flat ``name -> ndarray`` dict. Names are
dotted and grouped by prefix (``rgb.backbone``, ``rgb.convlstm``,
``rgb.classifier``, ``flow.stem``, ``flow.layer0`` ..., ``fusion``), which is
what freeze masks and checkpoints operate on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..repflow import (
    DEFAULT_LAMBDA,
    DEFAULT_TAU,
    DEFAULT_THETA,
    FLOW_PARAM_NAMES,
    FlowParams,
    flow_layer_var,
    restore_var,
)
from ..rgb_stream import ConvLSTMParams, cam, convlstm_sequence, spatial_attention, winning_class

CE_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 4
    in_channels: int = 3
    backbone_stages: tuple = (8, 16, 32)
    convlstm_hidden: int = 512
    convlstm_kernel: int = 3
    convlstm_variant: str = "standard"
    flow_stem_channels: tuple = (16,)
    flow_layers: int = 2
    reduce_channels: int = 32
    n_iters: int = 20
    flow_tail_channels: tuple = (16,)
    dual_denominator: str = "grad_u"
    tau: float = DEFAULT_TAU
    theta: float = DEFAULT_THETA
    lambda_: float = DEFAULT_LAMBDA

    @property
    def min_frames(self) -> int:
        return self.flow_layers + 1 if self.flow_layers else 1


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class TinyBackbone:
    """``len(stages)`` blocks of 3x3 conv + ReLU + 2x2 mean pooling, then a linear head.

    The head weights double as the class activation map weights.
    """

    def __init__(self, prefix: str, stages, in_channels: int, n_classes: int):
        self.prefix, self.stages = prefix, tuple(stages)
        self.in_channels, self.n_classes = in_channels, n_classes

    @property
    def units(self) -> int:
        return self.stages[-1] if self.stages else self.in_channels

    def init(self, rng) -> dict:
        out, c_in = {}, self.in_channels
        for i, c_out in enumerate(self.stages):
            out[f"{self.prefix}.conv{i}.w"] = _he(rng, (c_out, c_in, 3, 3), 9 * c_in)
            out[f"{self.prefix}.conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        out[f"{self.prefix}.head.w"] = rng.normal(0.0, 1.0 / np.sqrt(c_in), (self.n_classes, c_in))
        out[f"{self.prefix}.head.b"] = np.zeros(self.n_classes)
        return out

    def forward(self, v: dict, frames):
        """``frames`` ``[N, C, H, W]`` -> (activations ``[N, L, H/2^s, W/2^s]``, logits ``[N, K]``)."""
        x = ad.as_var(frames)
        for i in range(len(self.stages)):
            x = ad.avg_pool2(ad.relu(ad.conv2d(x, v[f"{self.prefix}.conv{i}.w"], v[f"{self.prefix}.conv{i}.b"])))
        pooled = ad.mean(x, axis=(2, 3))
        logits = pooled @ ad.transpose(v[f"{self.prefix}.head.w"], (1, 0)) + v[f"{self.prefix}.head.b"]
        return x, logits


@dataclass
class TwoStreamModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def backbone(self) -> TinyBackbone:
        c = self.config
        return TinyBackbone("rgb.backbone", c.backbone_stages, c.in_channels, c.n_classes)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "TwoStreamModel":
        """Each stream draws from its own generator, so changing the flow
        configuration never changes the RGB initialization."""
        c = config
        rng_rgb, rng_flow, rng_fuse = (np.random.default_rng([seed, k]) for k in range(3))
        bb = TinyBackbone("rgb.backbone", c.backbone_stages, c.in_channels, c.n_classes)
        p = bb.init(rng_rgb)
        lstm = ConvLSTMParams.initialize(bb.units, c.convlstm_hidden, c.convlstm_kernel, rng_rgb)
        p["rgb.convlstm.wx"], p["rgb.convlstm.wh"], p["rgb.convlstm.b"] = lstm.wx, lstm.wh, lstm.b
        hid = c.convlstm_hidden
        p["rgb.convlstm.b"][hid : 2 * hid] = 1.0  # forget-gate bias
        p["rgb.classifier.w"] = rng_rgb.normal(0.0, 1.0 / np.sqrt(hid), (c.n_classes, hid))
        p["rgb.classifier.b"] = np.zeros(c.n_classes)

        if c.flow_layers:
            ch = c.in_channels
            for i, c_out in enumerate(c.flow_stem_channels):
                p[f"flow.stem{i}.w"] = _he(rng_flow, (c_out, ch, 3, 3), 9 * ch)
                p[f"flow.stem{i}.b"] = np.zeros(c_out)
                ch = c_out
            R = c.reduce_channels
            fp = FlowParams(tau=c.tau, theta=c.theta, lambda_=c.lambda_)
            for layer in range(c.flow_layers):
                pre = f"flow.layer{layer}"
                p[f"{pre}.reduce"] = rng_flow.normal(0.0, 1.0 / np.sqrt(ch), (R, ch, 1, 1))
                p[f"{pre}.restore"] = rng_flow.normal(0.0, 1.0 / np.sqrt(9 * 2 * R), (ch, 2 * R, 3, 3))
                for name in FLOW_PARAM_NAMES:
                    p[f"{pre}.{name}"] = np.array(getattr(fp, name), dtype=np.float64)
                if layer < c.flow_layers - 1:
                    mid = np.zeros((ch, ch, 3, 3))
                    mid[np.arange(ch), np.arange(ch), 1, 1] = 1.0
                    p[f"flow.mid{layer}.w"] = mid + rng_flow.normal(0.0, 0.01, mid.shape)
            for i, c_out in enumerate(c.flow_tail_channels):
                p[f"flow.tail{i}.w"] = _he(rng_flow, (c_out, ch, 3, 3), 9 * ch)
                p[f"flow.tail{i}.b"] = np.zeros(c_out)
                ch = c_out
            p["flow.classifier.w"] = rng_flow.normal(0.0, 1.0 / np.sqrt(ch), (c.n_classes, ch))
            p["flow.classifier.b"] = np.zeros(c.n_classes)
            fuse = np.concatenate([np.eye(c.n_classes), np.eye(c.n_classes)], axis=1) * 0.5
            p["fusion.w"] = fuse + rng_fuse.normal(0.0, 0.01, fuse.shape)
            p["fusion.b"] = np.zeros(c.n_classes)
        return cls(config, p)

    def copy(self) -> "TwoStreamModel":
        return TwoStreamModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def vars(self, trainable=None) -> dict:
        """Wrap parameters as Vars; only names accepted by ``trainable`` track gradients."""
        out = {}
        for k, val in self.params.items():
            if trainable is None or trainable(k):
                out[k] = ad.param(val, k)
            else:
                out[k] = ad.Var(val, name=k)
        return out

    # -- streams --------------------------------------------------------

    def rgb_logits(self, clip, v: dict | None = None):
        v = self.vars() if v is None else v
        c = self.config
        clip = ad.as_var(clip)
        if clip.ndim != 4 or clip.shape[0] < 1:
            raise ValueError(f"clip must be [T, C, H, W] with T >= 1, got {clip.shape}")
        acts, bb_logits = self.backbone.forward(v, clip)
        head = v["rgb.backbone.head.w"]
        attended = []
        for t in range(clip.shape[0]):
            k = winning_class(bb_logits.value[t])
            M = cam(head[k], acts[t])
            attended.append(spatial_attention(acts[t], M))
        lstm = ConvLSTMParams(v["rgb.convlstm.wx"], v["rgb.convlstm.wh"], v["rgb.convlstm.b"])
        state = convlstm_sequence(ad.stack(attended), lstm, c.convlstm_variant)
        pooled = ad.mean(state.h, axis=(1, 2))
        return v["rgb.classifier.w"] @ pooled + v["rgb.classifier.b"]

    def flow_features(self, clip, v: dict | None = None):
        v = self.vars() if v is None else v
        c = self.config
        x = ad.as_var(clip)
        if c.flow_layers == 0:
            raise ValueError("model has no flow stream")
        if x.ndim != 4 or x.shape[0] < c.min_frames:
            raise ValueError(f"flow stream with {c.flow_layers} layer(s) needs at least {c.min_frames} frames")
        for i in range(len(c.flow_stem_channels)):
            x = ad.relu(ad.conv2d(x, v[f"flow.stem{i}.w"], v[f"flow.stem{i}.b"]))
        for layer in range(c.flow_layers):
            lv = {name: v[f"flow.layer{layer}.{name}"] for name in (*FLOW_PARAM_NAMES, "reduce", "restore")}
            x = restore_var(flow_layer_var(x, lv, c.n_iters, dual_denominator=c.dual_denominator), lv)
            if layer < c.flow_layers - 1:
                x = ad.conv2d(x, v[f"flow.mid{layer}.w"])
        return x

    def flow_logits(self, clip, v: dict | None = None):
        v = self.vars() if v is None else v
        x = self.flow_features(clip, v)
        for i in range(len(self.config.flow_tail_channels)):
            x = ad.relu(ad.conv2d(x, v[f"flow.tail{i}.w"], v[f"flow.tail{i}.b"]))
        pooled = ad.mean(x, axis=(2, 3))  # [T', C]
        per_step = pooled @ ad.transpose(v["flow.classifier.w"], (1, 0)) + v["flow.classifier.b"]
        return ad.mean(per_step, axis=0)

    def fused_probs(self, clip, v: dict | None = None):
        v = self.vars() if v is None else v
        return fuse(self.rgb_logits(clip, v), self.flow_logits(clip, v), (v["fusion.w"], v["fusion.b"]))

    def predict_probs(self, clip, stream: str = "fused") -> np.ndarray:
        if stream == "rgb" or (stream == "fused" and self.config.flow_layers == 0):
            return ad.softmax(self.rgb_logits(clip)).value
        if stream == "flow":
            return ad.softmax(self.flow_logits(clip)).value
        if stream == "fused":
            return self.fused_probs(clip).value
        raise ValueError(f"unknown stream {stream!r}")


def rgb_stream_forward(clip, model: TwoStreamModel) -> np.ndarray:
    return model.rgb_logits(clip).value


def flow_stream_forward(clip, model: TwoStreamModel) -> np.ndarray:
    return model.flow_logits(clip).value


def fuse(rgb_logits, flow_logits, fusion_head):
    """Softmax of a linear map over the concatenated stream logits.

    ``fusion_head`` is ``(W [K, 2K], b [K])`` or just ``W``.
    """
    head = fusion_head if isinstance(fusion_head, tuple) else (fusion_head,)
    graph = any(isinstance(x, ad.Var) for x in (rgb_logits, flow_logits, *head))
    if isinstance(fusion_head, tuple):
        W, b = fusion_head
    else:
        W, b = fusion_head, None
    r, f = ad.as_var(rgb_logits), ad.as_var(flow_logits)
    if r.shape != f.shape or r.ndim != 1:
        raise ValueError(f"stream logits must be equal-length vectors, got {r.shape} and {f.shape}")
    z = ad.as_var(W) @ ad.concat([r, f])
    if b is not None:
        z = z + b
    probs = ad.softmax(z)
    return probs if graph else probs.value


def cross_entropy(probs, c: int):
    """``-log p_c`` with ``p_c`` floored at 1e-12."""
    graph = isinstance(probs, ad.Var)
    p = ad.as_var(probs)
    if not 0 <= int(c) < p.shape[-1]:
        raise ValueError(f"class index {c} out of range for {p.shape[-1]} classes")
    loss = -ad.log(ad.maximum(p[int(c)], CE_FLOOR))
    return loss if graph else float(loss.value)
