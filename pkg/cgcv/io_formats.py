"""
File Formats
============

Binary PPM/PGM images, Middlebury .flo flow files, PNG flow
visualizations, "CGCV" volume dumps and "CGCK" checkpoints.

All writers go through ``atomic_write`` (temp file + rename).
"""

import io
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image

from cgcv.errors import FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLO_MAGIC = 202021.25
VOLUME_MAGIC = b"CGCV"
CHECKPOINT_MAGIC = b"CGCK"
FORMAT_VERSION = 1


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write bytes to a temp file next to ``path`` then rename over it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"wrote {len(data)} bytes to {path}")


# ============================================
# PPM / PGM
# ============================================

def _read_header_token(data: bytes, pos: int, path: str) -> Tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping # comments"""
    while pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", path, start)
    return data[start:pos], pos


def read_image(path: PathLike) -> np.ndarray:
    """
    Read a binary PPM (P6) or PGM (P5) image.

    Returns:
        float64 array (H, W, 3) in [0, 1]; grayscale is replicated to 3 channels

    Raises:
        FormatError: on a bad magic, bad dims or truncated payload
    """
    path = str(path)
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"expected magic P5 or P6, got {magic!r}", path, 0)
    channels = 3 if magic == b"P6" else 1

    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        offset = pos
        token, pos = _read_header_token(data, pos, path)
        try:
            value = int(token)
        except ValueError:
            raise FormatError(f"{label} is not an integer: {token!r}", path, offset) from None
        if value <= 0 or (label == "maxval" and value > 65535):
            raise FormatError(f"invalid {label} {value}", path, offset)
        fields.append(value)
    width, height, maxval = fields
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", path, pos)
    pos += 1

    sample_bytes = 1 if maxval < 256 else 2
    expected = width * height * channels * sample_bytes
    actual = len(data) - pos
    if actual < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {actual}", path, pos)

    dtype = np.uint8 if sample_bytes == 1 else np.dtype(">u2")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    image = pixels.reshape(height, width, channels).astype(np.float64) / maxval
    if channels == 1:
        image = np.repeat(image, 3, axis=2)
    return image


def write_pnm(path: PathLike, image: np.ndarray) -> None:
    """
    Write an 8-bit binary PGM (2-D or single channel) or PPM (3 channels).

    Float inputs are taken as [0, 1] and rounded; uint8 is written as is.
    """
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write image of shape {image.shape} as PNM", str(path))
    height, width = image.shape[:2]
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    atomic_write(path, header + np.ascontiguousarray(image).tobytes())


# ============================================
# MIDDLEBURY .FLO
# ============================================

def write_flo(path: PathLike, flow: np.ndarray) -> None:
    """Write an (H, W, 2) flow as little-endian .flo"""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}", str(path))
    if not np.isfinite(flow).all():
        raise FormatError("flow contains non-finite values", str(path))
    height, width = flow.shape[:2]
    header = struct.pack("<fii", FLO_MAGIC, width, height)
    payload = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    atomic_write(path, header + payload)


def read_flo(path: PathLike) -> np.ndarray:
    """
    Read a .flo file into a float32 (H, W, 2) array.

    Raises:
        FormatError: on a magic mismatch, bad dims or wrong payload size
    """
    path = str(path)
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"header needs 12 bytes, file has {len(data)}", path, 0)
    magic, width, height = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad magic {magic!r}, expected {FLO_MAGIC}", path, 0)
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dims {width}x{height}", path, 4)
    expected = width * height * 2 * 4
    if len(data) - 12 != expected:
        raise FormatError(f"payload: expected {expected} bytes, got {len(data) - 12}", path, 12)
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2).astype(np.float32)


def flow_to_array(flow: torch.Tensor) -> np.ndarray:
    """(2, H, W) tensor -> float32 (H, W, 2) array"""
    return flow.detach().to(torch.float32).permute(1, 2, 0).contiguous().numpy()


def flow_from_array(array: np.ndarray, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """(H, W, 2) array -> (2, H, W) tensor"""
    return torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).to(dtype).contiguous()


# ============================================
# FLOW VISUALIZATION
# ============================================

COLORWHEEL: Optional[np.ndarray] = None


def generate_color_wheel() -> np.ndarray:
    """Middlebury color wheel, 55 RGB entries in [0, 1]"""
    # steps between hues, chosen for perceptual similarity
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    colorwheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))

    i, j = 0, RY
    colorwheel[i:j, 0] = 1.0
    colorwheel[i:j, 1] = np.arange(RY) / RY

    i, j = j, j + YG
    colorwheel[i:j, 0] = 1.0 - np.arange(YG) / YG
    colorwheel[i:j, 1] = 1.0

    i, j = j, j + GC
    colorwheel[i:j, 1] = 1.0
    colorwheel[i:j, 2] = np.arange(GC) / GC

    i, j = j, j + CB
    colorwheel[i:j, 1] = 1.0 - np.arange(CB) / CB
    colorwheel[i:j, 2] = 1.0

    i, j = j, j + BM
    colorwheel[i:j, 0] = np.arange(BM) / BM
    colorwheel[i:j, 2] = 1.0

    i, j = j, j + MR
    colorwheel[i:j, 0] = 1.0
    colorwheel[i:j, 2] = 1.0 - np.arange(MR) / MR

    return colorwheel


def flow_to_rgb(flow: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """
    Color-wheel encoding of an (H, W, 2) flow: hue from direction,
    saturation from magnitude normalized by the field maximum. Zero flow is
    white. Returns uint8 (H, W, 3).
    """
    global COLORWHEEL
    if COLORWHEEL is None:
        COLORWHEEL = generate_color_wheel()

    u, v = flow[..., 0].astype(np.float64), flow[..., 1].astype(np.float64)
    angle = np.arctan2(-v, -u) / np.pi
    length = np.sqrt(u ** 2 + v ** 2)
    length = np.clip(length / max(float(length.max(initial=0.0)), eps), 0.0, 1.0)

    ncols = COLORWHEEL.shape[0]
    idx = (angle + 1.0) / 2.0 * (ncols - 1)
    idx0 = np.floor(idx).astype(np.int64)
    idx1 = (idx0 + 1) % ncols
    alpha = (idx - idx0)[..., None]
    col = (1.0 - alpha) * COLORWHEEL[idx0] + alpha * COLORWHEEL[idx1]

    col = 1.0 - length[..., None] * (1.0 - col)
    return np.clip(np.rint(col * 255.0), 0, 255).astype(np.uint8)


def write_png(path: PathLike, image: np.ndarray) -> None:
    """Encode a uint8 (H, W, 3) or (H, W) image as PNG"""
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buffer, format="PNG")
    atomic_write(path, buffer.getvalue())


def flow_to_png(path: PathLike, flow: np.ndarray) -> np.ndarray:
    """Write the color-wheel image of a flow; returns the image"""
    image = flow_to_rgb(flow)
    write_png(path, image)
    return image


# ============================================
# VOLUME DUMPS
# ============================================

def write_volume(path: PathLike, volume: torch.Tensor) -> None:
    """Dump an (h1, w1, h2, w2) volume: magic, version, 4 dims, f32 payload"""
    if volume.dim() != 4:
        raise FormatError(f"volume must be 4-D, got {tuple(volume.shape)}", str(path))
    header = VOLUME_MAGIC + struct.pack("<5I", FORMAT_VERSION, *volume.shape)
    payload = volume.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    atomic_write(path, header + payload)


def read_volume(path: PathLike) -> torch.Tensor:
    path = str(path)
    data = Path(path).read_bytes()
    if data[:4] != VOLUME_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {VOLUME_MAGIC!r}", path, 0)
    if len(data) < 24:
        raise FormatError(f"header needs 24 bytes, file has {len(data)}", path, 4)
    version, *dims = struct.unpack("<5I", data[4:24])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    expected = int(np.prod(dims)) * 4
    if len(data) - 24 != expected:
        raise FormatError(f"payload: expected {expected} bytes, got {len(data) - 24}", path, 24)
    array = np.frombuffer(data, dtype="<f4", offset=24).reshape(dims).astype(np.float32)
    return torch.from_numpy(array)


# ============================================
# CHECKPOINTS
# ============================================

def save_checkpoint(path: PathLike, tensors: Mapping[str, torch.Tensor]) -> None:
    """
    Write a named-tensor table: magic, version, count, then per tensor
    (u32 name length, name, u32 rank, u32 dims, f32 payload).
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        array = tensor.detach().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.astype("<f4").tobytes())
    atomic_write(path, b"".join(chunks))
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: PathLike) -> Dict[str, torch.Tensor]:
    """Read a named-tensor table written by ``save_checkpoint``"""
    path = str(path)
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}", path, 0)

    def take(fmt: str, pos: int) -> Tuple[tuple, int]:
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"truncated: need {size} bytes, {len(data) - pos} left", path, pos)
        return struct.unpack(fmt, data[pos:pos + size]), pos + size

    (version, count), pos = take("<II", 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)

    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,), pos = take("<I", pos)
        if pos + name_len > len(data):
            raise FormatError("truncated tensor name", path, pos)
        try:
            name = data[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not valid UTF-8 ({e.reason})", path, pos + e.start) from None
        pos += name_len
        (rank,), pos = take("<I", pos)
        dims, pos = take(f"<{rank}I", pos)
        numel = int(np.prod(dims)) if rank else 1
        if pos + numel * 4 > len(data):
            raise FormatError(f"tensor {name!r}: payload needs {numel * 4} bytes, {len(data) - pos} left", path, pos)
        array = np.frombuffer(data, dtype="<f4", count=numel, offset=pos).reshape(dims).astype(np.float32)
        tensors[name] = torch.from_numpy(array)
        pos += numel * 4
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after tensor table", path, pos)
    return tensors
