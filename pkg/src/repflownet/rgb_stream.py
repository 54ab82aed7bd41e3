"""Appearance branch: class activation maps, spatial softmax attention, ConvLSTM.

Functions accept numpy arrays or autodiff ``Var`` values. With plain arrays
they return arrays; if any argument is a ``Var`` the result is a ``Var`` and
participates in backpropagation.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffcheck import note_branch

GATES = ("input", "forget", "candidate", "output")


def _has_var(obj) -> bool:
    if isinstance(obj, ad.Var):
        return True
    if isinstance(obj, (ConvLSTMParams, ConvLSTMState)):
        return any(_has_var(v) for v in vars(obj).values())
    if isinstance(obj, (list, tuple)):
        return any(_has_var(v) for v in obj)
    return False


def _array_io(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        graph = any(_has_var(a) for a in (*args, *kwargs.values()))
        out = fn(*args, **kwargs)
        if graph:
            return out
        if isinstance(out, ad.Var):
            return out.value
        if isinstance(out, ConvLSTMState):
            return ConvLSTMState(ad.as_var(out.h).value, ad.as_var(out.c).value)
        return out

    return wrapper


def _val(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x, dtype=np.float64)


@_array_io
def cam(class_weights_row, activations):
    """Class activation map: weighted sum of activation planes ``[L, H, W] -> [H, W]``."""
    w, a = ad.as_var(class_weights_row), ad.as_var(activations)
    if w.ndim != 1 or a.ndim != 3 or w.shape[0] != a.shape[0]:
        raise ValueError(f"weights {w.shape} do not match activations {a.shape}")
    return ad.sum(ad.reshape(w, (-1, 1, 1)) * a, axis=0)


def winning_class(logits) -> int:
    logits = _val(logits)
    if logits.size == 0:
        raise ValueError("empty logits")
    k = int(np.argmax(logits))
    note_branch(k)
    return k


@_array_io
def attention_weights(M_c):
    """Softmax over all spatial positions of ``M_c``, max-subtracted."""
    M = ad.as_var(M_c)
    if not np.all(np.isfinite(M.value)):
        raise ValueError("class activation map contains non-finite values")
    return ad.reshape(ad.softmax(ad.reshape(M, (-1,))), M.shape)


@_array_io
def spatial_attention(f, M_c):
    """Scale features ``[C, H, W]`` by the spatial softmax of ``M_c`` ``[H, W]``."""
    f, M = ad.as_var(f), ad.as_var(M_c)
    if f.ndim != 3 or M.shape != f.shape[1:]:
        raise ValueError(f"feature map {f.shape} does not match attention map {M.shape}")
    return f * ad.reshape(attention_weights(M), (1,) + M.shape)


@dataclass
class ConvLSTMParams:
    """Gate kernels stacked in :data:`GATES` order.

    ``wx`` is ``[4*hidden, C_in, k, k]``, ``wh`` is ``[4*hidden, hidden, k, k]``
    and ``b`` is ``[4*hidden]``.
    """

    wx: object
    wh: object
    b: object

    def __post_init__(self):
        wx, wh, b = _val(self.wx), _val(self.wh), _val(self.b)
        hid = self.hidden_channels
        if wx.shape[0] != 4 * hid or wh.shape[:2] != (4 * hid, hid) or b.shape != (4 * hid,):
            raise ValueError("inconsistent ConvLSTM parameter shapes")
        if wx.shape[2:] != wh.shape[2:] or wx.shape[2] % 2 == 0 or wx.shape[3] % 2 == 0:
            raise ValueError("gate kernels must share odd spatial extents")

    @property
    def hidden_channels(self) -> int:
        return _val(self.wh).shape[1]

    @property
    def input_channels(self) -> int:
        return _val(self.wx).shape[1]

    @classmethod
    def initialize(cls, in_channels: int, hidden_channels: int = 512, kernel: int = 3, rng=None, scale=None):
        rng = np.random.default_rng(rng)
        sx = scale if scale is not None else 1.0 / np.sqrt(in_channels * kernel * kernel)
        sh = scale if scale is not None else 1.0 / np.sqrt(hidden_channels * kernel * kernel)
        wx = rng.normal(0.0, sx, (4 * hidden_channels, in_channels, kernel, kernel))
        wh = rng.normal(0.0, sh, (4 * hidden_channels, hidden_channels, kernel, kernel))
        return cls(wx, wh, np.zeros(4 * hidden_channels))

    @classmethod
    def zeros(cls, in_channels: int, hidden_channels: int, kernel: int = 3):
        return cls(np.zeros((4 * hidden_channels, in_channels, kernel, kernel)),
                   np.zeros((4 * hidden_channels, hidden_channels, kernel, kernel)),
                   np.zeros(4 * hidden_channels))

    def gate_bias(self, gate: str):
        hid = self.hidden_channels
        i = GATES.index(gate)
        return _val(self.b)[i * hid : (i + 1) * hid]


@dataclass
class ConvLSTMState:
    h: object
    c: object

    @classmethod
    def zeros(cls, hidden: int, H: int, W: int, batch: tuple = ()):
        return cls(np.zeros((*batch, hidden, H, W)), np.zeros((*batch, hidden, H, W)))


@_array_io
def convlstm_step(f_SA, state: ConvLSTMState, params: ConvLSTMParams, variant: str = "standard"):
    """One ConvLSTM update on ``[C, H, W]`` (or batched ``[N, C, H, W]``) input.

    ``standard``: ``C_t = i*c~ + f*C_{t-1}``. ``as_printed``: ``C_t = c~*f_SA + C_{t-1}*f``,
    which needs as many input channels as hidden channels.
    """
    if variant not in ("standard", "as_printed"):
        raise ValueError(f"unknown ConvLSTM variant {variant!r}")
    x = ad.as_var(f_SA)
    h, c = ad.as_var(state.h), ad.as_var(state.c)
    hid = params.hidden_channels
    if x.shape[-3] != params.input_channels:
        raise ValueError(f"input has {x.shape[-3]} channels, kernels expect {params.input_channels}")
    if variant == "as_printed" and x.shape[-3] != hid:
        raise ValueError("as_printed cell update needs input channels == hidden channels")
    z = ad.conv2d(x, params.wx, params.b) + ad.conv2d(h, params.wh)
    sl = lambda k: z[..., k * hid : (k + 1) * hid, :, :]  # noqa: E731
    i_t = ad.sigmoid(sl(0))
    f_t = ad.sigmoid(sl(1))
    c_tilde = ad.tanh(sl(2))
    o_t = ad.sigmoid(sl(3))
    if variant == "standard":
        c_new = i_t * c_tilde + f_t * c
    else:
        c_new = c_tilde * x + c * f_t
    h_new = o_t * ad.tanh(c_new)
    return ConvLSTMState(h_new, c_new)


@_array_io
def convlstm_sequence(features, params: ConvLSTMParams, variant: str = "standard"):
    """Fold :func:`convlstm_step` over the leading time axis from the zero state."""
    x = ad.as_var(features)
    if x.ndim not in (4, 5) or x.shape[0] == 0:
        raise ValueError("features must be a non-empty [T, C, H, W] sequence")
    state = ConvLSTMState.zeros(params.hidden_channels, *x.shape[-2:], batch=x.shape[1:-3])
    for t in range(x.shape[0]):
        state = convlstm_step(x[t], state, params, variant)
    return state
