"""
Toy Encoders
============

Small strided conv stacks producing matching features g and Siamese
context features c at 1/8 of the input resolution.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from cgcv.context_volume import ContextBundle
from cgcv.errors import ConfigurationError, DimensionError
from cgcv.models import EncoderConfig
from cgcv.tensor_core import FeatureMap

logger = logging.getLogger(__name__)

GRID = 8


@dataclass(frozen=True)
class ImagePair:
    """Reference and target frames, (H, W, C) with values in [0, 1]"""
    reference: torch.Tensor
    target: torch.Tensor

    def __post_init__(self):
        if self.reference.shape != self.target.shape:
            raise DimensionError(f"frames differ in shape: {tuple(self.reference.shape)} vs {tuple(self.target.shape)}")

    def swapped(self) -> "ImagePair":
        return ImagePair(reference=self.target, target=self.reference)


# ============================================
# PADDING
# ============================================

@dataclass(frozen=True)
class PadRecord:
    """Rows added at the bottom and columns added at the right"""
    bottom: int = 0
    right: int = 0

    @property
    def is_empty(self) -> bool:
        return self.bottom == 0 and self.right == 0

    def as_tuple(self) -> Tuple[int, int]:
        return self.bottom, self.right

    def crop(self, field: torch.Tensor) -> torch.Tensor:
        """Crop a channels-first (C, H, W) full-resolution field back to the input size"""
        h, w = field.shape[-2:]
        return field[..., :h - self.bottom, :w - self.right]


def pad_to_grid(img: torch.Tensor, multiple: int = GRID) -> Tuple[torch.Tensor, PadRecord]:
    """
    Replicate-pad an (H, W, C) image at the right/bottom to the next
    multiple of ``multiple``.
    """
    if img.dim() != 3:
        raise DimensionError(f"image must be (H, W, C), got {tuple(img.shape)}")
    h, w = img.shape[:2]
    record = PadRecord(bottom=-h % multiple, right=-w % multiple)
    if record.is_empty:
        return img, record

    chw = img.permute(2, 0, 1).unsqueeze(0)
    padded = F.pad(chw, (0, record.right, 0, record.bottom), mode="replicate")
    return padded[0].permute(1, 2, 0), record


# ============================================
# ENCODER
# ============================================

class ToyEncoder(nn.Module):
    """Strided conv stages with ReLU between them; the last stage is linear"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.in_channels, *cfg.hidden_widths, cfg.out_channels]
        padding = (cfg.kernel_size - cfg.stride + 1) // 2
        self.stages = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=cfg.kernel_size, stride=cfg.stride, padding=max(padding, 0))
            for c_in, c_out in zip(widths[:-1], widths[1:])
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Seeded uniform He-style weights, zero biases"""
        generator = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for conv in self.stages:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=generator) * 2 - 1) * bound)
                conv.bias.zero_()

    def forward(self, chw: torch.Tensor) -> torch.Tensor:
        x = chw
        for index, conv in enumerate(self.stages):
            x = conv(x)
            if index < len(self.stages) - 1:
                x = F.relu(x)
        return x


def _to_chw(img: torch.Tensor, encoder: ToyEncoder) -> torch.Tensor:
    if img.dim() != 3:
        raise DimensionError(f"image must be (H, W, C), got {tuple(img.shape)}")
    h, w, c = img.shape
    if h % GRID or w % GRID:
        raise DimensionError(f"image {h}x{w} is not a multiple of {GRID}; pad it first")
    if c != encoder.cfg.in_channels:
        raise DimensionError(f"image has {c} channels, encoder expects {encoder.cfg.in_channels}")
    param = next(encoder.parameters())
    return img.permute(2, 0, 1).to(dtype=param.dtype)


def encode_matching(img: torch.Tensor, encoder: ToyEncoder) -> FeatureMap:
    """(H, W, C) image -> (n, H/8, W/8) matching features"""
    features = encoder(_to_chw(img, encoder))
    logger.debug(f"matching features {tuple(features.shape)}")
    return features


def encode_context(pair: ImagePair, encoder: ToyEncoder) -> ContextBundle:
    """
    Run one context encoder on both frames and split each output into net
    (first half of the channels) and inp (second half).

    Raises:
        ConfigurationError: if the encoder output channel count is odd
    """
    if encoder.cfg.out_channels % 2:
        raise ConfigurationError(f"context encoder needs an even channel count, got {encoder.cfg.out_channels}")
    c1 = encoder(_to_chw(pair.reference, encoder))
    c2 = encoder(_to_chw(pair.target, encoder))
    return ContextBundle.split(c1, c2)
