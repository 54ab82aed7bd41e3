"""Representation-flow layer: an unrolled TV-L1 primal-dual solver on feature maps.

The forward solver works on stacks of single-channel planes ``[..., H, W]``
and can record every iteration so :func:`rep_flow_backward` can run
reverse-mode differentiation through the loop by hand. :func:`rep_flow_op`
wraps the pair as a node of the :mod:`repflownet.autodiff` graph.

Stencils are stored exactly as printed (Sobel) and applied as true
convolutions, i.e. flipped before the cross-correlation, so the gradient
of a rightward ramp is positive.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffcheck import note_branch
from .tensor import NonFiniteError, as_tensor, conv2d, filter2d, filter2d_kernel_grad

SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])

# Sobel gain is 8 per unit slope; these equal the unit-slope TV-L1 defaults
# (tau 0.25, theta 0.3) after rescaling the flow by that gain.
SOBEL_GAIN_SQ = 64.0
DEFAULT_TAU = 0.25 / SOBEL_GAIN_SQ
DEFAULT_THETA = 0.3 / SOBEL_GAIN_SQ
DEFAULT_LAMBDA = 0.15


def _conv(z, k):
    return filter2d(z, k[::-1, ::-1])


def _conv_adjoint(g, k):
    return filter2d(g, k)


def _conv_kernel_grad(z, g, k):
    return filter2d_kernel_grad(z, g, k.shape)[::-1, ::-1]


@dataclass
class FlowParams:
    tau: float = DEFAULT_TAU
    theta: float = DEFAULT_THETA
    lambda_: float = DEFAULT_LAMBDA
    n_iters: int = 20
    sobel_x: np.ndarray = field(default_factory=lambda: SOBEL_X.copy())
    sobel_y: np.ndarray = field(default_factory=lambda: SOBEL_Y.copy())
    # the negative adjoint of the Sobel gradient is the Sobel stencil itself
    div_wx: np.ndarray = field(default_factory=lambda: SOBEL_X.copy())
    div_wy: np.ndarray = field(default_factory=lambda: SOBEL_Y.copy())
    eps: float = 1e-12
    dual_denominator: str = "grad_u"

    def __post_init__(self):
        for name in ("tau", "theta", "lambda_"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if int(self.n_iters) < 1:
            raise ValueError("n_iters must be a positive integer")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.dual_denominator not in ("grad_u", "u"):
            raise ValueError("dual_denominator must be 'grad_u' or 'u'")
        for name in ("sobel_x", "sobel_y", "div_wx", "div_wy"):
            k = np.asarray(getattr(self, name), dtype=np.float64)
            if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
                raise ValueError(f"{name} must be a 2-D kernel with odd extents")
            setattr(self, name, k)
        self.n_iters = int(self.n_iters)

    def replace(self, **changes) -> "FlowParams":
        return dataclasses.replace(self, **changes)


@dataclass
class FlowState:
    """Primal flow ``u`` ``[..., 2, H, W]`` and dual field ``p`` ``[..., 2, 2, H, W]``.

    ``p[..., k, d]`` is the dual plane of flow component ``k`` in spatial direction ``d``.
    """

    u: np.ndarray
    p: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "FlowState":
        *lead, H, W = shape
        return cls(np.zeros((*lead, 2, H, W)), np.zeros((*lead, 2, 2, H, W)))


@dataclass
class FlowGrads:
    F1: np.ndarray
    F2: np.ndarray
    tau: float
    theta: float
    lambda_: float
    sobel_x: np.ndarray
    sobel_y: np.ndarray
    div_wx: np.ndarray
    div_wy: np.ndarray


def _check_planes(F):
    if F.ndim < 2 or F.shape[-1] < 3 or F.shape[-2] < 3:
        raise ValueError(f"feature planes need H, W >= 3, got shape {F.shape}")


def feature_gradients(F, params: FlowParams):
    """Sobel responses ``(gx, gy)`` of each plane, zero padded, same shape."""
    F = as_tensor(F)
    _check_planes(F)
    return _conv(F, params.sobel_x), _conv(F, params.sobel_y)


def residual(F1, F2):
    F1, F2 = as_tensor(F1), as_tensor(F2)
    if F1.shape != F2.shape:
        raise ValueError(f"shape mismatch: {F1.shape} vs {F2.shape}")
    return F2 - F1


def divergence(p, params: FlowParams):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 4 or p.shape[-4:-2] != (2, 2):
        raise ValueError(f"dual field must be [..., 2, 2, H, W], got {p.shape}")
    return _conv(p[..., 0, :, :], params.div_wx) + _conv(p[..., 1, :, :], params.div_wy)


def grad_u(u, params: FlowParams):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 3 or u.shape[-3] != 2:
        raise ValueError(f"flow field must be [..., 2, H, W], got {u.shape}")
    _check_planes(u)
    return np.stack([_conv(u, params.sobel_x), _conv(u, params.sobel_y)], axis=-3)


def _dual_norm(a, u_new, params):
    if params.dual_denominator == "grad_u":
        return np.sqrt(a[..., 0, :, :] ** 2 + a[..., 1, :, :] ** 2)
    return np.sqrt(u_new[..., 0, :, :] ** 2 + u_new[..., 1, :, :] ** 2)


def _threshold(u, gx, gy, g2, rho_c, params: FlowParams):
    lt = params.lambda_ * params.theta
    rho = rho_c + gx * u[..., 0, :, :] + gy * u[..., 1, :, :]
    thresh = lt * g2
    m1 = rho < -thresh
    m2 = rho > thresh
    m3 = ~(m1 | m2)
    note_branch(m1.view(np.uint8) - m2.view(np.uint8))
    D = g2 + params.eps
    # v_k = u_k + coef * grad_k, one coefficient per branch
    coef = lt * (m1.astype(np.float64) - m2) - np.where(m3, rho / D, 0.0)
    v = u + coef[..., None, :, :] * np.stack([gx, gy], axis=-3)
    return v, rho, m1, m2, m3, coef


def threshold_update(u, gx, gy, rho_c, params: FlowParams):
    """Data-term step: ``v`` from the three-branch threshold on the linearized residual.

    Works pixelwise, so any plane size (including 1x1) is accepted.
    """
    u, gx, gy, rho_c = (np.asarray(a, dtype=np.float64) for a in (u, gx, gy, rho_c))
    return _threshold(u, gx, gy, gx * gx + gy * gy, rho_c, params)[0]


def _step(u, p, gx, gy, g2, rho_c, params: FlowParams):
    c = params.tau / params.theta
    v, rho, m1, m2, m3, coef = _threshold(u, gx, gy, g2, rho_c, params)
    div = divergence(p, params)
    u_new = v + params.theta * div
    a = grad_u(u_new, params)
    nrm = _dual_norm(a, u_new, params)
    den = 1.0 + c * nrm + params.eps
    den_b = den[..., :, None, :, :] if params.dual_denominator == "grad_u" else den[..., None, None, :, :]
    p_new = (p + c * a) / den_b
    if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(p_new))):
        raise NonFiniteError("TV-L1 iterate became non-finite; hyperparameters blew up")
    rec = dict(u=u, p=p, rho=rho, m1=m1, m2=m2, m3=m3, coef=coef, div=div,
               u_new=u_new, a=a, nrm=nrm, den_b=den_b, p_new=p_new)
    return u_new, p_new, rec


def tvl1_step(state: FlowState, gx, gy, rho_c, params: FlowParams) -> FlowState:
    """One primal-dual update: data thresholding, then the divergence and dual steps."""
    u_new, p_new, _ = _step(state.u, state.p, gx, gy, gx * gx + gy * gy, rho_c, params)
    return FlowState(u_new, p_new)


@dataclass
class FlowTape:
    F1: np.ndarray
    F2: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    steps: list


def rep_flow_forward(F1, F2, params: FlowParams, record: bool = True):
    """Run ``params.n_iters`` iterations from zero state; returns ``(u, tape)``.

    Planes may carry any leading batch shape; ``u`` is ``[..., 2, H, W]``.
    """
    rho_c = residual(F1, F2)
    F1, F2 = as_tensor(F1), as_tensor(F2)
    gx, gy = feature_gradients(F2, params)
    g2 = gx * gx + gy * gy
    state = FlowState.zeros(F2.shape)
    u, p = state.u, state.p
    steps = []
    for _ in range(params.n_iters):
        u, p, rec = _step(u, p, gx, gy, g2, rho_c, params)
        if record:
            steps.append(rec)
    return u, (FlowTape(F1, F2, gx, gy, steps) if record else None)


def rep_flow(F1, F2, params: FlowParams | None = None):
    """Flow field ``[..., 2, H, W]`` (``u_x`` then ``u_y``) from ``F1`` to ``F2``."""
    u, _ = rep_flow_forward(F1, F2, params or FlowParams(), record=False)
    return u


def rep_flow_backward(grad_out, tape: FlowTape, params: FlowParams) -> FlowGrads:
    """Reverse-mode gradients through the unrolled loop.

    Branch indicators of the data threshold are treated as constants, so the
    gradient follows whichever branch the forward pass took.
    """
    if tape is None or len(tape.steps) != params.n_iters:
        raise ValueError("backward needs the recorded forward intermediates")
    gx, gy = tape.gx, tape.gy
    lam, theta, tau, eps = params.lambda_, params.theta, params.tau, params.eps
    lt, c = lam * theta, tau / theta
    kx, ky, wx, wy = params.sobel_x, params.sobel_y, params.div_wx, params.div_wy

    gu = np.array(grad_out, dtype=np.float64, copy=True)
    if gu.shape != tape.steps[-1]["u_new"].shape:
        raise ValueError(f"upstream gradient shape {gu.shape} does not match flow shape")
    gp = None
    g_gx = np.zeros_like(gx)
    g_gy = np.zeros_like(gy)
    g_rho_c = np.zeros_like(gx)
    g_lt = g_c = g_theta = 0.0
    g_kx, g_ky = np.zeros_like(kx), np.zeros_like(ky)
    g_wx, g_wy = np.zeros_like(wx), np.zeros_like(wy)
    D = gx * gx + gy * gy + eps

    for rec in reversed(tape.steps):
        u, p, u_new, a = rec["u"], rec["p"], rec["u_new"], rec["a"]
        den_b, nrm = rec["den_b"], rec["nrm"]
        gu_new = gu
        ga = None
        g_p_prev = np.zeros_like(p)
        if gp is not None:
            gnum = gp / den_b
            g_den = -np.sum(gp * rec["p_new"] / den_b, axis=-3 if params.dual_denominator == "grad_u" else (-4, -3))
            g_p_prev += gnum
            ga = c * gnum
            g_c += float(np.sum(gnum * a) + np.sum(g_den * nrm))
            g_n = c * g_den
            inv = np.divide(1.0, nrm, out=np.zeros_like(nrm), where=nrm > 0)
            if params.dual_denominator == "grad_u":
                ga = ga + (g_n * inv)[..., :, None, :, :] * a
            else:
                gu_new = gu_new + (g_n * inv)[..., None, :, :] * u_new
            # a = grad_u(u_new)
            gu_new = gu_new + _conv_adjoint(ga[..., 0, :, :], kx) + _conv_adjoint(ga[..., 1, :, :], ky)
            g_kx += _conv_kernel_grad(u_new, ga[..., 0, :, :], kx)
            g_ky += _conv_kernel_grad(u_new, ga[..., 1, :, :], ky)

        # u_new = v + theta * div(p)
        gv = gu_new
        g_theta += float(np.sum(gu_new * rec["div"]))
        g_div = theta * gu_new
        g_p_prev[..., 0, :, :] += _conv_adjoint(g_div, wx)
        g_p_prev[..., 1, :, :] += _conv_adjoint(g_div, wy)
        g_wx += _conv_kernel_grad(p[..., 0, :, :], g_div, wx)
        g_wy += _conv_kernel_grad(p[..., 1, :, :], g_div, wy)

        # v = u + coef * (gx, gy)
        coef, rho, m3 = rec["coef"], rec["rho"], rec["m3"]
        gu_prev = gv.copy()
        g_coef = gv[..., 0, :, :] * gx + gv[..., 1, :, :] * gy
        g_gx += gv[..., 0, :, :] * coef
        g_gy += gv[..., 1, :, :] * coef
        g_lt += float(np.sum(g_coef * (rec["m1"].astype(np.float64) - rec["m2"])))
        g_r3 = np.where(m3, -g_coef, 0.0)
        g_rho = g_r3 / D
        g_D = -g_r3 * rho / (D * D)
        g_gx += 2.0 * gx * g_D
        g_gy += 2.0 * gy * g_D

        # rho = rho_c + gx * u_x + gy * u_y
        g_rho_c += g_rho
        g_gx += g_rho * u[..., 0, :, :]
        g_gy += g_rho * u[..., 1, :, :]
        gu_prev[..., 0, :, :] += g_rho * gx
        gu_prev[..., 1, :, :] += g_rho * gy
        gu, gp = gu_prev, g_p_prev

    g_lambda = g_lt * theta
    g_theta += g_lt * lam - g_c * tau / (theta * theta)
    g_tau = g_c / theta
    g_F2 = g_rho_c + _conv_adjoint(g_gx, kx) + _conv_adjoint(g_gy, ky)
    g_kx += _conv_kernel_grad(tape.F2, g_gx, kx)
    g_ky += _conv_kernel_grad(tape.F2, g_gy, ky)
    return FlowGrads(F1=-g_rho_c, F2=g_F2, tau=g_tau, theta=g_theta, lambda_=g_lambda,
                     sobel_x=g_kx, sobel_y=g_ky, div_wx=g_wx, div_wy=g_wy)


def tv_l1_energy(u, F1, F2, params: FlowParams) -> float:
    """Data term ``lambda * sum|rho|`` plus smoothness ``sum|grad u|`` at zero-padded borders."""
    gx, gy = feature_gradients(F2, params)
    rho = residual(F1, F2) + gx * u[..., 0, :, :] + gy * u[..., 1, :, :]
    a = grad_u(u, params)
    return float(params.lambda_ * np.abs(rho).sum() + np.sqrt((a ** 2).sum(axis=-3)).sum())


def energy_trace(F1, F2, params: FlowParams) -> np.ndarray:
    """Energy before the first iteration and after each one (length ``n_iters + 1``)."""
    F1, F2 = as_tensor(F1), as_tensor(F2)
    gx, gy = feature_gradients(F2, params)
    g2, rho_c = gx * gx + gy * gy, F2 - F1
    state = FlowState.zeros(F2.shape)
    u, p = state.u, state.p
    out = [tv_l1_energy(u, F1, F2, params)]
    for _ in range(params.n_iters):
        u, p, _ = _step(u, p, gx, gy, g2, rho_c, params)
        out.append(tv_l1_energy(u, F1, F2, params))
    return np.array(out)


# ---------------------------------------------------------------------------
# autodiff integration

FLOW_PARAM_NAMES = ("tau", "theta", "lambda_", "sobel_x", "sobel_y", "div_wx", "div_wy")


def flow_param_vars(params: FlowParams) -> dict:
    return {name: ad.param(getattr(params, name), name=name) for name in FLOW_PARAM_NAMES}


def rep_flow_op(F1, F2, fvars: dict, n_iters: int, eps: float = 1e-12, dual_denominator: str = "grad_u"):
    """Autodiff node computing :func:`rep_flow` with the hand-written backward.

    ``fvars`` maps each of :data:`FLOW_PARAM_NAMES` to a Var or array.
    """
    F1, F2 = ad.as_var(F1), ad.as_var(F2)
    vs = {k: ad.as_var(fvars[k]) for k in FLOW_PARAM_NAMES}
    params = FlowParams(
        tau=float(vs["tau"].value), theta=float(vs["theta"].value), lambda_=float(vs["lambda_"].value),
        n_iters=n_iters, sobel_x=vs["sobel_x"].value, sobel_y=vs["sobel_y"].value,
        div_wx=vs["div_wx"].value, div_wy=vs["div_wy"].value, eps=eps, dual_denominator=dual_denominator,
    )
    needs = F1.requires_grad or F2.requires_grad or any(v.requires_grad for v in vs.values())
    u, tape = rep_flow_forward(F1.value, F2.value, params, record=needs)

    def bw(g):
        grads = rep_flow_backward(g, tape, params)
        if F1.requires_grad:
            F1._accumulate(grads.F1)
        if F2.requires_grad:
            F2._accumulate(grads.F2)
        for k in FLOW_PARAM_NAMES:
            if vs[k].requires_grad:
                vs[k]._accumulate(np.reshape(getattr(grads, k), vs[k].shape))

    return ad.Var(u, (F1, F2, *vs.values()), bw)


# ---------------------------------------------------------------------------
# layer: reduce -> per-channel flow -> restore


@dataclass
class RepFlowLayerConfig:
    """1x1 channel reduction, flow per reduced channel, 3x3 restore convolution."""

    reduce_kernel: np.ndarray  # [R, C_in, 1, 1]
    restore_kernel: np.ndarray  # [C_out, 2R, 3, 3]
    flow_params: FlowParams = field(default_factory=FlowParams)

    def __post_init__(self):
        self.reduce_kernel = np.asarray(self.reduce_kernel, dtype=np.float64)
        self.restore_kernel = np.asarray(self.restore_kernel, dtype=np.float64)
        if self.reduce_kernel.ndim != 4 or self.reduce_kernel.shape[2:] != (1, 1):
            raise ValueError("reduce kernel must be [R, C_in, 1, 1]")
        if self.restore_kernel.ndim != 4 or self.restore_kernel.shape[1] != 2 * self.reduce_channels:
            raise ValueError("restore kernel must be [C_out, 2R, kh, kw]")

    @property
    def reduce_channels(self) -> int:
        return self.reduce_kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.reduce_kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.restore_kernel.shape[0]

    @classmethod
    def initialize(cls, in_channels: int, out_channels: int | None = None, reduce_channels: int = 32,
                   rng=None, flow_params: FlowParams | None = None) -> "RepFlowLayerConfig":
        rng = np.random.default_rng(rng)
        out_channels = in_channels if out_channels is None else out_channels
        reduce = rng.normal(0.0, 1.0 / np.sqrt(in_channels), (reduce_channels, in_channels, 1, 1))
        restore = rng.normal(0.0, 1.0 / np.sqrt(9 * 2 * reduce_channels), (out_channels, 2 * reduce_channels, 3, 3))
        return cls(reduce, restore, flow_params or FlowParams())

    def vars(self) -> dict:
        out = flow_param_vars(self.flow_params)
        out["reduce"] = ad.param(self.reduce_kernel, "reduce")
        out["restore"] = ad.param(self.restore_kernel, "restore")
        return out


def flow_layer_var(features, v: dict, n_iters: int, eps=1e-12, dual_denominator="grad_u"):
    """``[T, C, H, W]`` -> ``[T-1, 2R, H, W]`` with channel ``2r`` = u_x and ``2r+1`` = u_y of channel ``r``."""
    features = ad.as_var(features)
    T, _, H, W = features.shape
    if T < 2:
        raise ValueError("representation flow needs at least two time steps")
    reduced = ad.conv2d(features, v["reduce"], pad=0)
    u = rep_flow_op(reduced[:-1], reduced[1:], v, n_iters, eps, dual_denominator)  # [T-1, R, 2, H, W]
    return ad.reshape(u, (T - 1, -1, H, W))


def restore_var(flow_features, v: dict):
    return ad.conv2d(flow_features, v["restore"], pad="same")


def _cfg_vars(cfg: RepFlowLayerConfig) -> dict:
    out = {k: getattr(cfg.flow_params, k) for k in FLOW_PARAM_NAMES}
    out["reduce"], out["restore"] = cfg.reduce_kernel, cfg.restore_kernel
    return out


def rep_flow_layer(features, cfg: RepFlowLayerConfig) -> np.ndarray:
    features = as_tensor(features)
    if features.ndim != 4:
        raise ValueError("features must be [T, C, H, W]")
    if features.shape[0] < 2:
        raise ValueError("representation flow needs at least two time steps")
    fp = cfg.flow_params
    return flow_layer_var(features, _cfg_vars(cfg), fp.n_iters, fp.eps, fp.dual_denominator).value


def restore_channels(flow_features, cfg: RepFlowLayerConfig) -> np.ndarray:
    flow_features = as_tensor(flow_features)
    if flow_features.shape[1] != 2 * cfg.reduce_channels:
        raise ValueError(f"expected {2 * cfg.reduce_channels} flow channels, got {flow_features.shape[1]}")
    return restore_var(flow_features, _cfg_vars(cfg)).value


def flow_of_flow(features, layer1: RepFlowLayerConfig, mid_conv, layer2: RepFlowLayerConfig | None):
    """Two flow layers with a shape-preserving convolution between them.

    ``layer2=None`` bypasses the second flow layer (its restore included).
    """
    features = as_tensor(features)
    if features.shape[0] < (3 if layer2 is not None else 2):
        raise ValueError("flow-of-flow needs at least three time steps")
    x = restore_channels(rep_flow_layer(features, layer1), layer1)
    x = conv2d(x, np.asarray(mid_conv, dtype=np.float64), pad="same")
    if layer2 is None:
        return x
    return restore_channels(rep_flow_layer(x, layer2), layer2)
