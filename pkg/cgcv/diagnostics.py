"""
Volume and Feature Diagnostics
==============================

Exposes every intermediate volume (C, A, M, S, V) for one frame pair and
turns correlation planes and feature channels into grayscale images.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Union

import numpy as np
import torch

from cgcv.context_volume import (
    ContextBundle, GateParams, assemble, context_correlation, cross_attention, gate, project_qk,
)
from cgcv.corr_engine import build_all_pairs
from cgcv.encoders import ImagePair, encode_matching, pad_to_grid
from cgcv.errors import ContractViolation, DimensionError
from cgcv.io_formats import write_pnm
from cgcv.network import CGCVFlowNet
from cgcv.tensor_core import CorrVolume4, FeatureMap, check_volume

logger = logging.getLogger(__name__)

VolumeName = Literal["C", "A", "M", "S", "V"]
FeatureKind = Literal["matching", "net", "inp"]


@dataclass(frozen=True)
class VolumeSet:
    """All volumes of one frame pair, each (h1, w1, h2, w2)"""
    c: CorrVolume4
    a: CorrVolume4
    m: CorrVolume4
    s: CorrVolume4
    v: CorrVolume4

    def get(self, which: VolumeName) -> CorrVolume4:
        try:
            return {"C": self.c, "A": self.a, "M": self.m, "S": self.s, "V": self.v}[which.upper()]
        except KeyError:
            raise ContractViolation(f"unknown volume {which!r}; expected one of C, A, M, S, V") from None


def compute_volume_set(g1: FeatureMap, g2: FeatureMap, ctx: ContextBundle, params: GateParams) -> VolumeSet:
    """
    Compute each intermediate separately. With gating off, A is all ones
    and M equals C; S is always computed even when lifting is off.
    """
    with torch.no_grad():
        c = build_all_pairs(g1, g2)
        if params.gate_mode == "none":
            a = torch.ones_like(c)
            m = c
        else:
            a = cross_attention(project_qk(ctx, params), params.gate_mode)
            m = gate(c, a)
        s = context_correlation(ctx)
        v = assemble(c, ctx, params)
    return VolumeSet(c=c, a=a, m=m, s=s, v=v)


def volumes_for_pair(model: CGCVFlowNet, pair: ImagePair) -> VolumeSet:
    """Encode a frame pair with the network's weights and expose its volumes"""
    with torch.no_grad():
        g1, g2, ctx, _ = model.encode(pair)
    return compute_volume_set(g1, g2, ctx, model.gate)


# ============================================
# GRAYSCALE RENDERING
# ============================================

def plane_to_gray(plane: torch.Tensor) -> np.ndarray:
    """
    Min-max normalize a 2-D plane to uint8 [0, 255]. A plane with zero range
    becomes uniform 128.
    """
    if plane.dim() != 2:
        raise DimensionError(f"plane must be 2-D, got {tuple(plane.shape)}")
    values = plane.detach().to(torch.float64).numpy()
    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        logger.warning(f"plane has zero range (value {low:.6g}); emitting uniform gray")
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - low) / (high - low) * 255.0).astype(np.uint8)


def dump_plane(volumes: VolumeSet, which: VolumeName, i: int, j: int) -> np.ndarray:
    """
    Grayscale image of the (k, l) plane of reference cell column i, row j.

    Raises:
        ContractViolation: if the query is outside the reference grid
    """
    volume = volumes.get(which)
    h1, w1, _, _ = check_volume(volume, which)
    if not (0 <= i < w1 and 0 <= j < h1):
        raise ContractViolation(f"query ({i}, {j}) outside the {w1}x{h1} reference grid")
    return plane_to_gray(volume[j, i])


# ============================================
# FEATURE DUMPS
# ============================================

def encode_single(model: CGCVFlowNet, img: torch.Tensor, which: FeatureKind) -> FeatureMap:
    """Matching features, or the net/inp half of the context features, of one image"""
    padded, _ = pad_to_grid(img.to(model.cfg.precision.dtype), model.cfg.grid_multiple)
    with torch.no_grad():
        if which == "matching":
            return encode_matching(padded, model.fnet)
        context = encode_matching(padded, model.cnet)
    t = context.shape[0] // 2
    if which == "net":
        return context[:t]
    if which == "inp":
        return context[t:]
    raise ContractViolation(f"unknown feature kind {which!r}; expected matching, net or inp")


def dump_features(fmap: FeatureMap, out_dir: Union[str, Path], prefix: str = "channel") -> List[Path]:
    """Write one normalized PGM per channel; returns the written paths"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index in range(fmap.shape[0]):
        path = out_dir / f"{prefix}_{index:03d}.pgm"
        write_pnm(path, plane_to_gray(fmap[index]))
        paths.append(path)
    logger.info(f"Wrote {len(paths)} feature channels to {out_dir}")
    return paths


def volume_summary(volumes: VolumeSet) -> Dict[str, Dict[str, float]]:
    """min / max / mean of every volume, for logging"""
    summary = {}
    for name in ("C", "A", "M", "S", "V"):
        volume = volumes.get(name)
        summary[name] = {"min": float(volume.min()), "max": float(volume.max()), "mean": float(volume.mean())}
    return summary
