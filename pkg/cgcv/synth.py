"""
Synthetic Frame Pairs
=====================

Wrap-around sinusoid textures moved by a known translation or affine map,
so the ground-truth flow is exact. Optionally plants a duplicated texture
patch in the target to create a matching ambiguity.

On-disk dataset layout::

    <dir>/pair_000/ref.ppm
    <dir>/pair_000/tgt.ppm
    <dir>/pair_000/flow.flo
    <dir>/pair_000/spec.txt
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from cgcv.config import read_config_file, write_config_file
from cgcv.encoders import ImagePair
from cgcv.errors import ConfigurationError, SpecError
from cgcv.io_formats import flow_from_array, flow_to_array, read_flo, read_image, write_flo, write_pnm
from cgcv.models import SynthSpec

logger = logging.getLogger(__name__)

NUM_WAVES = 12
MAX_CYCLES = 6
MAX_OUT_OF_FRAME = 0.5


@dataclass(frozen=True)
class FlowSample:
    """A frame pair with its (2, H, W) ground-truth flow in pixels"""
    pair: ImagePair
    flow: torch.Tensor


@dataclass(frozen=True)
class PatchLayout:
    """Top-left (x, y) corners of the planted patches"""
    source: Tuple[int, int]
    match: Tuple[int, int]
    distractor: Tuple[int, int]
    size: int

    def region(self, corner: Tuple[int, int]) -> Tuple[slice, slice]:
        """Row/column slices of a patch"""
        x, y = corner
        return slice(y, y + self.size), slice(x, x + self.size)


# ============================================
# TEXTURE
# ============================================

class WaveTexture:
    """
    Sum of random sinusoids with an integer number of cycles across the
    frame in each direction, so it tiles exactly and can be evaluated at
    any real coordinate.
    """

    def __init__(self, width: int, height: int, seed: int, num_waves: int = NUM_WAVES):
        rng = np.random.default_rng(seed)
        self.width = width
        self.height = height
        shape = (num_waves, 3)
        self.fx = rng.integers(-MAX_CYCLES, MAX_CYCLES + 1, size=shape)
        self.fy = rng.integers(-MAX_CYCLES, MAX_CYCLES + 1, size=shape)
        # a wave with no cycles is a constant; give it one cycle along x
        self.fx[(self.fx == 0) & (self.fy == 0)] = 1
        self.phase = rng.uniform(0.0, 2 * np.pi, size=shape)
        self.amplitude = rng.uniform(0.2, 1.0, size=shape)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sample at pixel coordinates; returns (*x.shape, 3) in [0, 1]"""
        u = (x / self.width)[..., None, None]
        v = (y / self.height)[..., None, None]
        waves = self.amplitude * np.sin(2 * np.pi * (self.fx * u + self.fy * v) + self.phase)
        total = waves.sum(axis=-2) / self.amplitude.sum(axis=0)
        return 0.5 + 0.5 * total


def pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return xs, ys


# ============================================
# MOTION
# ============================================

def motion_matrix(spec: SynthSpec) -> np.ndarray:
    """2x3 map from reference to target pixel coordinates"""
    if spec.motion == "translation":
        return np.array([[1.0, 0.0, spec.dx], [0.0, 1.0, spec.dy]])
    return np.asarray(spec.affine, dtype=np.float64).reshape(2, 3)


def ground_truth_flow(spec: SynthSpec) -> np.ndarray:
    """Exact (H, W, 2) flow: target position minus reference position"""
    xs, ys = pixel_grid(spec.width, spec.height)
    m = motion_matrix(spec)
    u = m[0, 0] * xs + m[0, 1] * ys + m[0, 2] - xs
    v = m[1, 0] * xs + m[1, 1] * ys + m[1, 2] - ys
    return np.stack([u, v], axis=-1)


def out_of_frame_fraction(spec: SynthSpec) -> float:
    """Share of reference pixels whose target position leaves the frame"""
    xs, ys = pixel_grid(spec.width, spec.height)
    flow = ground_truth_flow(spec)
    tx, ty = xs + flow[..., 0], ys + flow[..., 1]
    outside = (tx < 0) | (tx > spec.width - 1) | (ty < 0) | (ty > spec.height - 1)
    return float(outside.mean())


def _check_motion(spec: SynthSpec) -> None:
    if spec.motion == "affine":
        linear = motion_matrix(spec)[:, :2]
        if abs(np.linalg.det(linear)) < 1e-9:
            raise SpecError(f"affine map {spec.affine} is singular")
    fraction = out_of_frame_fraction(spec)
    if fraction > MAX_OUT_OF_FRAME:
        raise SpecError(f"motion moves {fraction:.0%} of pixels out of frame (limit {MAX_OUT_OF_FRAME:.0%})")


# ============================================
# DUPLICATE PATCH
# ============================================

def plan_patches(spec: SynthSpec) -> PatchLayout:
    """
    Source patch left of center in the reference; it lands at source + d in
    the target, and an identical distractor is mirrored to the right.

    Raises:
        SpecError: for non-translation motion, fractional shifts, or when the
            patches do not fit disjointly in the frame
    """
    if spec.motion != "translation":
        raise SpecError("duplicate_patch needs translation motion")
    if spec.dx != int(spec.dx) or spec.dy != int(spec.dy):
        raise SpecError(f"duplicate_patch needs an integer shift, got ({spec.dx}, {spec.dy})")

    size = spec.patch_size
    dx, dy = int(spec.dx), int(spec.dy)
    source = (spec.width // 4 - size // 2, spec.height // 2 - size // 2)
    match = (source[0] + dx, source[1] + dy)
    distractor = (spec.width - size - match[0], match[1])

    for name, (x, y) in (("source", source), ("match", match), ("distractor", distractor)):
        if x < 0 or y < 0 or x + size > spec.width or y + size > spec.height:
            raise SpecError(f"{name} patch at ({x}, {y}) of size {size} does not fit in "
                            f"{spec.width}x{spec.height}")
    if abs(distractor[0] - match[0]) < size and abs(distractor[1] - match[1]) < size:
        raise SpecError(f"no room for a disjoint distractor patch (match at {match}, size {size})")
    return PatchLayout(source=source, match=match, distractor=distractor, size=size)


# ============================================
# PAIR GENERATION
# ============================================

def synth_pair(spec: SynthSpec) -> Tuple[ImagePair, torch.Tensor]:
    """
    Render a reference frame and its warped target.

    Returns:
        (pair of float64 (H, W, 3) frames, exact (2, H, W) flow in pixels)

    Raises:
        SpecError: if more than half of the pixels leave the frame, the map
            is singular, or the patch layout is impossible
    """
    _check_motion(spec)
    texture = WaveTexture(spec.width, spec.height, spec.seed)
    xs, ys = pixel_grid(spec.width, spec.height)
    reference = texture(xs, ys)

    if spec.duplicate_patch:
        layout = plan_patches(spec)
        patch = WaveTexture(spec.patch_size, spec.patch_size, spec.seed + 1)(*pixel_grid(spec.patch_size, spec.patch_size))
        rows, cols = layout.region(layout.source)
        reference[rows, cols] = patch
        target = np.roll(reference, shift=(int(spec.dy), int(spec.dx)), axis=(0, 1))
        rows, cols = layout.region(layout.distractor)
        target[rows, cols] = patch
    else:
        # target(q) = reference(M^-1 q), evaluated on the periodic texture
        m = motion_matrix(spec)
        inverse = np.linalg.inv(m[:, :2])
        qx, qy = xs - m[0, 2], ys - m[1, 2]
        px = inverse[0, 0] * qx + inverse[0, 1] * qy
        py = inverse[1, 0] * qx + inverse[1, 1] * qy
        target = texture(px, py)

    flow = ground_truth_flow(spec)
    logger.debug(f"synth pair {spec.width}x{spec.height} seed={spec.seed} motion={spec.motion} "
                 f"duplicate_patch={spec.duplicate_patch}")
    pair = ImagePair(reference=torch.from_numpy(reference), target=torch.from_numpy(np.ascontiguousarray(target)))
    return pair, flow_from_array(flow)


def inverse_warp(target: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """
    Pull the target back onto the reference grid: out(p) = target(p + flow(p)),
    bilinear with wrap-around.
    """
    height, width = target.shape[:2]
    xs, ys = pixel_grid(width, height)
    x = xs + flow[..., 0]
    y = ys + flow[..., 1]
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    wx, wy = (x - x0)[..., None], (y - y0)[..., None]
    x0, x1 = x0 % width, (x0 + 1) % width
    y0, y1 = y0 % height, (y0 + 1) % height
    top = target[y0, x0] * (1 - wx) + target[y0, x1] * wx
    bottom = target[y1, x0] * (1 - wx) + target[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def translation_specs(count: int, seed: int = 0, max_shift: int = 6, width: int = 64, height: int = 64,
                      duplicate_patch: bool = False) -> List[SynthSpec]:
    """Specs for ``count`` integer constant-translation pairs with |d| <= max_shift"""
    rng = np.random.default_rng(seed)
    specs = []
    for index in range(count):
        dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
        specs.append(SynthSpec(width=width, height=height, seed=seed * 1000 + index, motion="translation",
                               dx=float(dx), dy=float(dy), duplicate_patch=duplicate_patch))
    return specs


# ============================================
# SPEC FILES AND DATASET DIRECTORIES
# ============================================

def read_synth_spec(path: Union[str, Path]) -> SynthSpec:
    """Parse a ``key = value`` spec file"""
    values = read_config_file(path)
    unknown = set(values) - set(SynthSpec.model_fields)
    if unknown:
        raise ConfigurationError(f"{path}: unknown synth keys {sorted(unknown)}")
    try:
        return SynthSpec(**values)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "spec"
        raise SpecError(f"{path}: {location}: {first['msg']}") from e


def write_synth_spec(path: Union[str, Path], spec: SynthSpec) -> None:
    write_config_file(path, spec.model_dump())


def write_sample(directory: Union[str, Path], spec: SynthSpec) -> Path:
    """Render one pair and write ref.ppm, tgt.ppm, flow.flo and spec.txt"""
    directory = Path(directory)
    pair, flow = synth_pair(spec)
    directory.mkdir(parents=True, exist_ok=True)
    write_pnm(directory / "ref.ppm", pair.reference.numpy())
    write_pnm(directory / "tgt.ppm", pair.target.numpy())
    write_flo(directory / "flow.flo", flow_to_array(flow))
    write_synth_spec(directory / "spec.txt", spec)
    return directory


def load_sample(directory: Union[str, Path]) -> FlowSample:
    directory = Path(directory)
    reference = torch.from_numpy(read_image(directory / "ref.ppm"))
    target = torch.from_numpy(read_image(directory / "tgt.ppm"))
    flow = flow_from_array(read_flo(directory / "flow.flo"))
    return FlowSample(pair=ImagePair(reference=reference, target=target), flow=flow)


def load_dataset(directory: Union[str, Path]) -> List[FlowSample]:
    """Load every ``pair_*`` subdirectory, in name order"""
    directory = Path(directory)
    entries = sorted(p for p in directory.glob("pair_*") if p.is_dir())
    if not entries:
        raise SpecError(f"no pair_* directories under {directory}")
    samples = [load_sample(entry) for entry in entries]
    logger.info(f"Loaded {len(samples)} synthetic pairs from {directory}")
    return samples
