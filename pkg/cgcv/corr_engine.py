"""
Correlation Engine
==================

All-pairs correlation volume, the average-pooled correlation pyramid and
radius-bounded bilinear lookup around the current flow estimate.

Every dense kernel invocation is recorded in ``KERNEL_COUNTER`` so callers
can verify that volumes are built once per frame pair.
"""

import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch

from cgcv.errors import ContractViolation, DimensionError
from cgcv.models import LookupConfig
from cgcv.tensor_core import (
    CorrVolume4, FeatureMap, avg_pool_target, bilinear_sample_planes,
    check_feature_map, check_volume, inv_sqrt,
)

logger = logging.getLogger(__name__)


# ============================================
# KERNEL ACCOUNTING
# ============================================

class KernelCounter:
    """Thread-safe tally of dense kernel invocations"""

    def __init__(self):
        self._counts: Counter = Counter()
        self._lock = threading.Lock()

    def record(self, kernel: str) -> None:
        with self._lock:
            self._counts[kernel] += 1

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())


KERNEL_COUNTER = KernelCounter()


# ============================================
# ALL-PAIRS VOLUME
# ============================================

def build_all_pairs(g1: FeatureMap, g2: FeatureMap, scale: Optional[float] = None) -> CorrVolume4:
    """
    Correlate every reference cell with every target cell.

    Args:
        g1: (n, h1, w1) reference features
        g2: (n, h2, w2) target features
        scale: multiplier on the inner products (default 1/sqrt(n))

    Returns:
        (h1, w1, h2, w2) volume
    """
    n1, h1, w1 = check_feature_map(g1, "g1")
    n2, h2, w2 = check_feature_map(g2, "g2")
    if n1 != n2:
        raise DimensionError(f"channel mismatch between frames: {n1} vs {n2}")
    if scale is None:
        scale = inv_sqrt(n1)

    KERNEL_COUNTER.record("all_pairs")
    logger.debug(f"all-pairs volume {h1}x{w1} -> {h2}x{w2} over {n1} channels")

    corr = g1.reshape(n1, h1 * w1).t() @ g2.reshape(n1, h2 * w2)
    return (corr * scale).reshape(h1, w1, h2, w2)


# ============================================
# PYRAMID
# ============================================

@dataclass(frozen=True)
class CorrPyramid:
    """Level 0 at full resolution; each further level halves the target dims"""
    levels: Tuple[CorrVolume4, ...]

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("a pyramid needs at least one level")
        h1, w1, h2, w2 = check_volume(self.levels[0], "level 0")
        for t, level in enumerate(self.levels[1:], start=1):
            expected = (h1, w1, h2 >> t, w2 >> t)
            if tuple(level.shape) != expected:
                raise DimensionError(f"level {t} has shape {tuple(level.shape)}, expected {expected}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def reference_dims(self) -> Tuple[int, int]:
        h1, w1 = self.levels[0].shape[:2]
        return h1, w1


def build_pyramid(volume: CorrVolume4, num_levels: int) -> CorrPyramid:
    """
    Pool a volume into ``num_levels`` levels.

    Raises:
        DimensionError: if the target dims are not divisible by 2^(num_levels-1)
    """
    _, _, h2, w2 = check_volume(volume)
    if num_levels < 1:
        raise DimensionError(f"num_levels must be >= 1, got {num_levels}")
    factor = 2 ** (num_levels - 1)
    if h2 % factor or w2 % factor:
        raise DimensionError(f"target dims {h2}x{w2} not divisible by {factor} for {num_levels} levels")

    levels: List[CorrVolume4] = [volume]
    for _ in range(num_levels - 1):
        levels.append(avg_pool_target(levels[-1]))
    return CorrPyramid(levels=tuple(levels))


# ============================================
# LOOKUP
# ============================================

def window_offsets(radius: int, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """(dx, dy) of a (2r+1)^2 window: dy outer, dx inner, both ascending"""
    d = torch.arange(-radius, radius + 1, dtype=dtype)
    oy, ox = torch.meshgrid(d, d, indexing="ij")
    return ox.reshape(-1), oy.reshape(-1)


def lookup(pyramid: CorrPyramid, flow: torch.Tensor, cfg: LookupConfig) -> torch.Tensor:
    """
    Sample correlation windows around the flow-displaced position.

    For reference cell (i, j) at level t the window is centred on
    ((i + u) / 2^t, (j + v) / 2^t). Channels are ordered levels ascending,
    then window offsets dy-outer / dx-inner.

    Args:
        pyramid: correlation pyramid with reference grid (h1, w1)
        flow: (2, h1, w1) current flow in grid cells
        cfg: lookup radius and depth

    Returns:
        (num_levels * (2r+1)^2, h1, w1) correlation features
    """
    h1, w1 = pyramid.reference_dims
    if flow.dim() != 3 or tuple(flow.shape) != (2, h1, w1):
        raise DimensionError(f"flow shape {tuple(flow.shape)} does not match reference grid (2, {h1}, {w1})")
    if cfg.num_levels != pyramid.num_levels:
        raise DimensionError(f"lookup expects {cfg.num_levels} levels, pyramid has {pyramid.num_levels}")

    dtype = pyramid.levels[0].dtype
    flow = flow.to(dtype)
    ys, xs = torch.meshgrid(torch.arange(h1, dtype=dtype), torch.arange(w1, dtype=dtype), indexing="ij")
    cx = (xs + flow[0]).reshape(-1, 1)
    cy = (ys + flow[1]).reshape(-1, 1)
    ox, oy = window_offsets(cfg.radius, dtype)

    sampled = []
    for t, level in enumerate(pyramid.levels):
        _, _, h2, w2 = level.shape
        planes = level.reshape(h1 * w1, h2, w2)
        x = cx / 2 ** t + ox.unsqueeze(0)
        y = cy / 2 ** t + oy.unsqueeze(0)
        sampled.append(bilinear_sample_planes(planes, x, y))

    features = torch.cat(sampled, dim=1)
    return features.t().reshape(cfg.length, h1, w1)


# ============================================
# DIAGNOSTICS
# ============================================

def argmax_plane(volume: CorrVolume4, i: int, j: int) -> Tuple[int, int]:
    """
    Target cell (k, l) of the largest value in the plane of reference cell
    (i, j); ties go to the smallest row-major index.
    """
    h1, w1, _, w2 = check_volume(volume)
    if not (0 <= i < w1 and 0 <= j < h1):
        raise ContractViolation(f"query (i={i}, j={j}) outside {w1}x{h1} reference grid")
    linear = int(torch.argmax(volume[j, i].reshape(-1)))
    return linear % w2, linear // w2
