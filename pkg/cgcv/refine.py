"""
Iterative Flow Refinement
=========================

Minimal RAFT-style decoder: a convolutional GRU driven by correlation
lookups, the inp context half and the current flow, plus a 2-channel conv
head producing flow increments. Correlation volumes are never rebuilt
here; each iteration only samples the pyramid it is given.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import torch
import torch.nn as nn

from cgcv.context_volume import ContextBundle
from cgcv.corr_engine import CorrPyramid, lookup
from cgcv.encoders import GRID, PadRecord
from cgcv.errors import DimensionError
from cgcv.models import LookupConfig, RefineConfig
from cgcv.tensor_core import FeatureMap, check_feature_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GRUState:
    """Hidden state of the refinement GRU, values in (-1, 1)"""
    hidden: FeatureMap


def init_state(ctx: ContextBundle) -> Tuple[GRUState, torch.Tensor]:
    """hidden = tanh(net1), flow = 0 on the reference grid"""
    _, h, w = check_feature_map(ctx.net1, "net1")
    flow = torch.zeros(2, h, w, dtype=ctx.net1.dtype)
    return GRUState(hidden=torch.tanh(ctx.net1)), flow


# ============================================
# UPDATE OPERATOR
# ============================================

class ConvGRU(nn.Module):
    """Convolutional GRU cell"""

    def __init__(self, hidden_size: int, input_size: int, kernel_size: int):
        super().__init__()
        padding = kernel_size // 2
        self.convz = nn.Conv2d(hidden_size + input_size, hidden_size, kernel_size, padding=padding)
        self.convr = nn.Conv2d(hidden_size + input_size, hidden_size, kernel_size, padding=padding)
        self.convq = nn.Conv2d(hidden_size + input_size, hidden_size, kernel_size, padding=padding)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([h, x], dim=0)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=0)))
        return (1 - z) * h + z * q


class UpdateBlock(nn.Module):
    """GRU over [corr, inp, flow] followed by a flow head"""

    def __init__(self, cfg: RefineConfig):
        super().__init__()
        self.cfg = cfg
        input_size = cfg.corr_channels + cfg.input_channels + 2
        self.gru = ConvGRU(cfg.hidden_channels, input_size, cfg.gru_kernel_size)
        self.flow_head = nn.Conv2d(cfg.hidden_channels, 2, cfg.head_kernel_size, padding=cfg.head_kernel_size // 2)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Seeded small uniform weights; the flow head starts near zero"""
        generator = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for conv in (self.gru.convz, self.gru.convr, self.gru.convq, self.flow_head):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                bound = 1.0 / fan_in ** 0.5
                if conv is self.flow_head:
                    bound *= 0.1
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator) * 2 - 1) * bound)
                conv.bias.zero_()


def gru_step(state: GRUState, corr: torch.Tensor, inp: FeatureMap, flow: torch.Tensor,
             block: UpdateBlock) -> Tuple[GRUState, torch.Tensor]:
    """One GRU update; returns the new state and flow + delta"""
    _, h, w = check_feature_map(state.hidden, "hidden")
    for name, tensor in (("corr", corr), ("inp", inp), ("flow", flow)):
        if tensor.dim() != 3 or tuple(tensor.shape[1:]) != (h, w):
            raise DimensionError(f"{name} shape {tuple(tensor.shape)} does not match grid {h}x{w}")
    if corr.shape[0] != block.cfg.corr_channels or inp.shape[0] != block.cfg.input_channels:
        raise DimensionError(f"corr/inp channels {corr.shape[0]}/{inp.shape[0]} do not match update block "
                             f"{block.cfg.corr_channels}/{block.cfg.input_channels}")

    x = torch.cat([corr, inp, flow], dim=0)
    hidden = block.gru(state.hidden, x)
    delta = block.flow_head(hidden)
    return GRUState(hidden=hidden), flow + delta


# ============================================
# UPSAMPLING
# ============================================

def _axis_weights(size: int, factor: int, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pos = (torch.arange(size * factor, dtype=dtype) / factor).clamp(max=size - 1)
    lo = torch.floor(pos).long()
    hi = (lo + 1).clamp(max=size - 1)
    return lo, hi, pos - lo.to(dtype)


def upsample_flow(flow: torch.Tensor, factor: int = GRID) -> torch.Tensor:
    """
    Bilinear upsampling of a (2, H, W) coarse field with displacements
    scaled by ``factor``. Fine pixel (X, Y) samples the coarse field at
    (X / factor, Y / factor), clamped at the far edges, so fine pixel
    (factor*i, factor*j) holds exactly factor * coarse (i, j).
    """
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise DimensionError(f"flow must be (2, H, W), got {tuple(flow.shape)}")
    _, h, w = flow.shape
    y0, y1, wy = _axis_weights(h, factor, flow.dtype)
    x0, x1, wx = _axis_weights(w, factor, flow.dtype)

    rows = flow[:, y0, :] * (1 - wy)[None, :, None] + flow[:, y1, :] * wy[None, :, None]
    fine = rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]
    return fine * factor


# ============================================
# REFINEMENT LOOP
# ============================================

def refine_iterates(ctx: ContextBundle, pyramid: CorrPyramid, block: UpdateBlock,
                    lookup_cfg: LookupConfig, pad: PadRecord) -> Iterator[torch.Tensor]:
    """Yield the cropped full-resolution flow after every iteration"""
    state, flow = init_state(ctx)
    for iteration in range(block.cfg.iterations):
        coords_flow = flow.detach() if block.cfg.detach_flow else flow
        corr = lookup(pyramid, coords_flow, lookup_cfg)
        state, flow = gru_step(state, corr, ctx.inp1, flow, block)
        logger.debug(f"iteration {iteration + 1}/{block.cfg.iterations}: "
                     f"mean |flow| {float(flow.detach().abs().mean()):.4f}")
        yield pad.crop(upsample_flow(flow))


def run_refinement(ctx: ContextBundle, pyramid: CorrPyramid, block: UpdateBlock,
                   lookup_cfg: LookupConfig, pad: PadRecord) -> torch.Tensor:
    """Refine for the configured iterations; return the final (2, H, W) flow"""
    predictions: List[torch.Tensor] = list(refine_iterates(ctx, pyramid, block, lookup_cfg, pad))
    return predictions[-1]
