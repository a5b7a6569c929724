"""
Context Guided Correlation Volume
=================================

Turns the raw all-pairs volume C into the context guided volume

    V = sigmoid(Q^T K / sqrt(d)) * C + lambda * S

where Q = Wq net1 and K = Wk net2 are linear projections of the context
"net" halves of both frames and S is the scaled correlation of those
halves. Gating (attention) and lifting (the lambda term) can be switched
independently for ablations.

Two paths compute V:
- ``assemble``: composition of the individual operations, autograd-traced.
- ``context_guided_volume``: one fused autograd Function whose backward is
  the hand-derived ``backward_assemble``. The network trains through this
  path; ``assemble`` is its reference.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from cgcv.corr_engine import KERNEL_COUNTER, build_all_pairs
from cgcv.errors import ContractViolation, DimensionError
from cgcv.models import GateConfig, GateMode
from cgcv.tensor_core import (
    CorrVolume4, FeatureMap, check_feature_map, check_same_shape,
    map_sigmoid, map_softmax_lastdims,
)

logger = logging.getLogger(__name__)


# ============================================
# DATA TYPES
# ============================================

@dataclass(frozen=True)
class ContextBundle:
    """net/inp halves of the Siamese context features of both frames"""
    net1: FeatureMap
    inp1: FeatureMap
    net2: FeatureMap
    inp2: FeatureMap

    def __post_init__(self):
        dims = {name: check_feature_map(getattr(self, name), name)
                for name in ("net1", "inp1", "net2", "inp2")}
        if dims["net1"][0] != dims["inp1"][0] or dims["net2"][0] != dims["inp2"][0]:
            raise DimensionError(f"net and inp halves differ in channels: {dims}")
        if dims["net1"][0] != dims["net2"][0]:
            raise DimensionError(f"frames differ in context channels: {dims}")
        if len({d[1:] for d in dims.values()}) != 1:
            raise DimensionError(f"context maps do not share spatial dims: {dims}")

    @property
    def context_dim(self) -> int:
        return self.net1.shape[0]

    @classmethod
    def split(cls, c1: FeatureMap, c2: FeatureMap) -> "ContextBundle":
        """Split full context maps channel-wise: net first half, inp second"""
        channels = check_feature_map(c1, "c1")[0]
        if channels % 2:
            raise DimensionError(f"context channels must be even, got {channels}")
        t = channels // 2
        return cls(net1=c1[:t], inp1=c1[t:], net2=c2[:t], inp2=c2[t:])


@dataclass(frozen=True)
class QKMaps:
    """Projected query (reference grid) and key (target grid) maps"""
    q: FeatureMap
    k: FeatureMap

    def __post_init__(self):
        if check_feature_map(self.q, "q")[0] != check_feature_map(self.k, "k")[0]:
            raise DimensionError(f"query/key lengths differ: {self.q.shape[0]} vs {self.k.shape[0]}")


class GateParams(nn.Module):
    """
    Learnable Wq, Wk (d x t) and lambda, plus the ablation switches.

    Wq/Wk start uniform in [-1/sqrt(t), 1/sqrt(t)] so initial logits sit near
    zero (gates near 0.5); lambda starts at exactly zero. No bias terms.
    """

    def __init__(self, cfg: GateConfig):
        super().__init__()
        self.cfg = cfg
        generator = torch.Generator().manual_seed(cfg.seed)
        bound = 1.0 / math.sqrt(cfg.context_dim)
        shape = (cfg.attn_dim, cfg.context_dim)
        self.wq = nn.Parameter((torch.rand(shape, generator=generator) * 2 - 1) * bound)
        self.wk = nn.Parameter((torch.rand(shape, generator=generator) * 2 - 1) * bound)
        self.lam = nn.Parameter(torch.zeros(()))

    @property
    def gate_mode(self) -> GateMode:
        return self.cfg.gate_mode

    @property
    def lift_enabled(self) -> bool:
        return self.cfg.lift_enabled


# ============================================
# FORWARD OPERATIONS
# ============================================

def project_qk(ctx: ContextBundle, params: GateParams) -> QKMaps:
    """Per-pixel linear maps q = Wq net1, k = Wk net2"""
    KERNEL_COUNTER.record("project_qk")
    return _project(ctx.net1, ctx.net2, params.wq, params.wk)


def _project(net1: FeatureMap, net2: FeatureMap, wq: torch.Tensor, wk: torch.Tensor) -> QKMaps:
    t = net1.shape[0]
    if wq.shape[1] != t or wk.shape[1] != t:
        raise DimensionError(f"projection columns {wq.shape[1]}/{wk.shape[1]} do not match context channels {t}")
    if wq.shape[0] != wk.shape[0]:
        raise DimensionError(f"Wq and Wk rows differ: {wq.shape[0]} vs {wk.shape[0]}")
    q = torch.einsum("dt,thw->dhw", wq, net1)
    k = torch.einsum("dt,thw->dhw", wk, net2)
    return QKMaps(q=q, k=k)


def cross_attention(qk: QKMaps, mode: GateMode) -> CorrVolume4:
    """
    Attention A = sigma(<q, k> / sqrt(d)) with sigma the sigmoid, or a
    softmax over each (k, l) plane.

    Raises:
        ContractViolation: for mode "none"; callers skip attention instead
    """
    if mode == "none":
        raise ContractViolation("cross_attention called with gate mode 'none'")
    KERNEL_COUNTER.record("cross_attention")
    logits = build_all_pairs(qk.q, qk.k)
    if mode == "sigmoid":
        return map_sigmoid(logits)
    if mode == "softmax":
        return map_softmax_lastdims(logits)
    raise ContractViolation(f"unknown gate mode {mode!r}")


def gate(c: CorrVolume4, a: CorrVolume4) -> CorrVolume4:
    """M = A * C element-wise"""
    check_same_shape(c, a, "gate")
    KERNEL_COUNTER.record("gate")
    return a * c


def context_correlation(ctx: ContextBundle) -> CorrVolume4:
    """S = <net1, net2> / sqrt(t) over all cell pairs"""
    KERNEL_COUNTER.record("context_correlation")
    return build_all_pairs(ctx.net1, ctx.net2)


def assemble(c: CorrVolume4, ctx: ContextBundle, params: GateParams) -> CorrVolume4:
    """
    V = gate(C, A) + lambda * S, honoring the ablation switches:
    gate mode "none" keeps raw C, lift disabled drops the lambda term.
    """
    KERNEL_COUNTER.record("assemble")
    if params.gate_mode == "none":
        v = c
    else:
        v = gate(c, cross_attention(project_qk(ctx, params), params.gate_mode))
    if params.lift_enabled:
        v = v + params.lam * context_correlation(ctx)
    return v


# ============================================
# FUSED FORWARD / BACKWARD
# ============================================

@dataclass
class AssembleState:
    """Tensors retained by the forward pass for ``backward_assemble``"""
    g1: FeatureMap
    g2: FeatureMap
    net1: FeatureMap
    net2: FeatureMap
    wq: torch.Tensor
    wk: torch.Tensor
    lam: torch.Tensor
    c: CorrVolume4
    a: Optional[CorrVolume4]
    s: Optional[CorrVolume4]
    q: Optional[FeatureMap]
    k: Optional[FeatureMap]
    gate_mode: GateMode
    lift_enabled: bool


@dataclass
class AssembleGrads:
    """Gradients of a scalar loss with respect to every input of V"""
    wq: torch.Tensor
    wk: torch.Tensor
    lam: torch.Tensor
    g1: FeatureMap
    g2: FeatureMap
    net1: FeatureMap
    net2: FeatureMap


def forward_assemble(g1: FeatureMap, g2: FeatureMap, net1: FeatureMap, net2: FeatureMap,
                     wq: torch.Tensor, wk: torch.Tensor, lam: torch.Tensor,
                     gate_mode: GateMode, lift_enabled: bool) -> Tuple[CorrVolume4, AssembleState]:
    """Compute V from raw features and keep what the backward pass needs"""
    KERNEL_COUNTER.record("assemble")
    c = build_all_pairs(g1, g2)
    a = q = k = s = None
    if gate_mode == "none":
        v = c
    else:
        KERNEL_COUNTER.record("project_qk")
        qk = _project(net1, net2, wq, wk)
        q, k = qk.q, qk.k
        a = cross_attention(qk, gate_mode)
        v = gate(c, a)
    if lift_enabled:
        KERNEL_COUNTER.record("context_correlation")
        s = build_all_pairs(net1, net2)
        v = v + lam * s

    state = AssembleState(g1=g1, g2=g2, net1=net1, net2=net2, wq=wq, wk=wk, lam=lam,
                          c=c, a=a, s=s, q=q, k=k, gate_mode=gate_mode, lift_enabled=lift_enabled)
    return v, state


def backward_assemble(grad_v: CorrVolume4, state: Optional[AssembleState]) -> AssembleGrads:
    """
    Reverse-mode gradients of V through all-pairs correlation, projection,
    attention, gating and lifting.

    Raises:
        ContractViolation: if the forward state is missing
    """
    if state is None:
        raise ContractViolation("backward_assemble needs the saved forward state")
    check_same_shape(grad_v, state.c, "backward_assemble")

    n, h1, w1 = state.g1.shape
    _, h2, w2 = state.g2.shape
    t = state.net1.shape[0]
    n1, n2 = h1 * w1, h2 * w2
    grad = grad_v.reshape(n1, n2)

    g1 = state.g1.reshape(n, n1)
    g2 = state.g2.reshape(n, n2)
    net1 = state.net1.reshape(t, n1)
    net2 = state.net2.reshape(t, n2)
    grad_net1 = torch.zeros_like(net1)
    grad_net2 = torch.zeros_like(net2)
    grad_wq = torch.zeros_like(state.wq)
    grad_wk = torch.zeros_like(state.wk)
    grad_lam = torch.zeros_like(state.lam)

    # lift: V += lambda * S
    if state.lift_enabled:
        s = state.s.reshape(n1, n2)
        grad_lam = (grad * s).sum().reshape(state.lam.shape)
        grad_s = state.lam * grad
        grad_net1 += (net2 @ grad_s.t()) / math.sqrt(t)
        grad_net2 += (net1 @ grad_s) / math.sqrt(t)

    # gate: M = A * C
    if state.gate_mode == "none":
        grad_c = grad
    else:
        a = state.a.reshape(n1, n2)
        c = state.c.reshape(n1, n2)
        grad_c = grad * a
        grad_a = grad * c
        if state.gate_mode == "sigmoid":
            grad_logits = grad_a * a * (1 - a)
        else:
            grad_logits = a * (grad_a - (grad_a * a).sum(dim=1, keepdim=True))

        d = state.q.shape[0]
        q = state.q.reshape(d, n1)
        k = state.k.reshape(d, n2)
        grad_q = (k @ grad_logits.t()) / math.sqrt(d)
        grad_k = (q @ grad_logits) / math.sqrt(d)
        grad_wq = grad_q @ net1.t()
        grad_wk = grad_k @ net2.t()
        grad_net1 += state.wq.t() @ grad_q
        grad_net2 += state.wk.t() @ grad_k

    # all-pairs: C = g1^T g2 / sqrt(n)
    grad_g1 = (g2 @ grad_c.t()) / math.sqrt(n)
    grad_g2 = (g1 @ grad_c) / math.sqrt(n)

    return AssembleGrads(
        wq=grad_wq, wk=grad_wk, lam=grad_lam,
        g1=grad_g1.reshape(n, h1, w1), g2=grad_g2.reshape(n, h2, w2),
        net1=grad_net1.reshape(t, h1, w1), net2=grad_net2.reshape(t, h2, w2),
    )


class ContextGuidedVolumeFunction(torch.autograd.Function):
    """Autograd wrapper: forward_assemble forward, backward_assemble backward"""

    @staticmethod
    def forward(ctx, g1, g2, net1, net2, wq, wk, lam, gate_mode, lift_enabled):
        v, state = forward_assemble(g1, g2, net1, net2, wq, wk, lam, gate_mode, lift_enabled)
        ctx.state = state
        return v

    @staticmethod
    def backward(ctx, grad_v):
        state = getattr(ctx, "state", None)
        grads = backward_assemble(grad_v.contiguous(), state)
        ctx.state = None
        return grads.g1, grads.g2, grads.net1, grads.net2, grads.wq, grads.wk, grads.lam, None, None


def context_guided_volume(g1: FeatureMap, g2: FeatureMap, ctx: ContextBundle,
                          params: GateParams) -> CorrVolume4:
    """Build V straight from matching and context features (fused path)"""
    if ctx.net1.shape[1:] != g1.shape[1:] or ctx.net2.shape[1:] != g2.shape[1:]:
        raise DimensionError(f"context grids {tuple(ctx.net1.shape[1:])}/{tuple(ctx.net2.shape[1:])} "
                             f"do not match matching grids {tuple(g1.shape[1:])}/{tuple(g2.shape[1:])}")
    return ContextGuidedVolumeFunction.apply(g1, g2, ctx.net1, ctx.net2, params.wq, params.wk, params.lam,
                                             params.gate_mode, params.lift_enabled)
