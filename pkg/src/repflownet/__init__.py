"""Differentiable representation-flow layer and a desk-scale two-stream action classifier."""

from .diffcheck import GradReport, gradcheck, numeric_gradient
from .repflow import (
    FlowParams,
    FlowState,
    RepFlowLayerConfig,
    flow_of_flow,
    rep_flow,
    rep_flow_backward,
    rep_flow_forward,
    rep_flow_layer,
    restore_channels,
)
from .rgb_stream import ConvLSTMParams, ConvLSTMState, attention_weights, cam, convlstm_step, spatial_attention
from .tensor import NonFiniteError, conv2d

__version__ = "0.1.0"
