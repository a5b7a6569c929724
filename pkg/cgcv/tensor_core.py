"""
Dense Tensor Primitives
=======================

Containers and element-wise / plane-wise operations every other module
composes.

Shape conventions:
- FeatureMap: tensor (C, H, W). Cell (i, j) is g[:, j, i]: column i, row j.
- CorrVolume4: tensor (h1, w1, h2, w2), row-major, so the (k, l) plane of
  reference cell (i, j) is ``v[j, i]`` and is contiguous in memory.
"""

import logging
import math
from enum import Enum
from typing import Tuple

import torch
import torch.nn.functional as F

from cgcv.errors import ContractViolation, DimensionError

logger = logging.getLogger(__name__)

FeatureMap = torch.Tensor
CorrVolume4 = torch.Tensor


class Precision(str, Enum):
    """Floating-point mode of a computation"""
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self is Precision.DOUBLE else torch.float32


# ============================================
# VALIDATION
# ============================================

def check_feature_map(fmap: torch.Tensor, name: str = "feature map") -> Tuple[int, int, int]:
    """Validate a (C, H, W) feature map and return its dims"""
    if fmap.dim() != 3:
        raise DimensionError(f"{name} must be (C, H, W), got shape {tuple(fmap.shape)}")
    return tuple(fmap.shape)


def check_volume(volume: torch.Tensor, name: str = "volume") -> Tuple[int, int, int, int]:
    """Validate an (h1, w1, h2, w2) correlation volume and return its dims"""
    if volume.dim() != 4:
        raise DimensionError(f"{name} must be (h1, w1, h2, w2), got shape {tuple(volume.shape)}")
    return tuple(volume.shape)


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def all_finite(t: torch.Tensor) -> bool:
    return bool(torch.isfinite(t).all())


# ============================================
# SCALAR KERNEL
# ============================================

def inner_product(a: FeatureMap, b: FeatureMap, i: int, j: int, k: int, l: int,
                  scale: float) -> float:
    """
    Scaled inner product of the feature vector at column i, row j of ``a``
    with the one at column k, row l of ``b``.

    Channels are summed in ascending order so repeated calls agree bit for
    bit.
    """
    ca, ha, wa = check_feature_map(a, "a")
    cb, hb, wb = check_feature_map(b, "b")
    if ca != cb:
        raise DimensionError(f"channel mismatch: {ca} vs {cb}")
    if not (0 <= i < wa and 0 <= j < ha):
        raise ContractViolation(f"reference index (i={i}, j={j}) outside {wa}x{ha} grid")
    if not (0 <= k < wb and 0 <= l < hb):
        raise ContractViolation(f"target index (k={k}, l={l}) outside {wb}x{hb} grid")

    va = a[:, j, i].tolist()
    vb = b[:, l, k].tolist()
    total = 0.0
    for x, y in zip(va, vb):
        total += x * y
    return scale * total


# ============================================
# VOLUME MAPS
# ============================================

def map_sigmoid(volume: CorrVolume4) -> CorrVolume4:
    """Element-wise logistic function"""
    check_volume(volume)
    return torch.sigmoid(volume)


def map_softmax_lastdims(volume: CorrVolume4) -> CorrVolume4:
    """Softmax over each (k, l) plane, independently per reference cell"""
    h1, w1, h2, w2 = check_volume(volume)
    flat = volume.reshape(h1, w1, h2 * w2)
    return torch.softmax(flat, dim=-1).reshape(h1, w1, h2, w2)


def avg_pool_target(volume: CorrVolume4) -> CorrVolume4:
    """
    Average 2x2 blocks of every target plane.

    Raises:
        DimensionError: if either target dim is odd
    """
    h1, w1, h2, w2 = check_volume(volume)
    if h2 % 2 or w2 % 2:
        raise DimensionError(f"target dims must be even to pool, got {h2}x{w2}")
    planes = volume.reshape(h1 * w1, 1, h2, w2)
    pooled = F.avg_pool2d(planes, kernel_size=2, stride=2)
    return pooled.reshape(h1, w1, h2 // 2, w2 // 2)


# ============================================
# BILINEAR SAMPLING
# ============================================

def bilinear_sample_planes(planes: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    Bilinearly sample a batch of planes at real coordinates.

    Args:
        planes: (N, H, W) values
        x, y: (N, P) column / row coordinates, one row of P points per plane

    Returns:
        (N, P) samples. Taps outside [0, W-1] x [0, H-1] read zero.

    Differentiable with respect to ``planes`` and to the coordinates
    (piecewise, through the interpolation weights).
    """
    if planes.dim() != 3:
        raise DimensionError(f"planes must be (N, H, W), got {tuple(planes.shape)}")
    if x.shape != y.shape or x.dim() != 2 or x.shape[0] != planes.shape[0]:
        raise DimensionError(f"coordinates {tuple(x.shape)}/{tuple(y.shape)} do not match planes {tuple(planes.shape)}")

    n, h, w = planes.shape
    flat = planes.reshape(n, h * w)

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.long()
    y0 = y0.long()

    def tap(xi: torch.Tensor, yi: torch.Tensor) -> torch.Tensor:
        inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        index = yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)
        return flat.gather(1, index) * inside.to(flat.dtype)

    return (wx0 * wy0 * tap(x0, y0)
            + wx1 * wy0 * tap(x0 + 1, y0)
            + wx0 * wy1 * tap(x0, y0 + 1)
            + wx1 * wy1 * tap(x0 + 1, y0 + 1))


def bilinear_sample_plane(plane: torch.Tensor, x: float, y: float) -> float:
    """Sample one (H, W) plane at column x, row y with zero padding"""
    if plane.dim() != 2:
        raise DimensionError(f"plane must be (H, W), got {tuple(plane.shape)}")
    xs = torch.tensor([[x]], dtype=plane.dtype)
    ys = torch.tensor([[y]], dtype=plane.dtype)
    return float(bilinear_sample_planes(plane.unsqueeze(0), xs, ys)[0, 0])


def inv_sqrt(n: int) -> float:
    return 1.0 / math.sqrt(n)
