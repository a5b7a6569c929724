"""
Pydantic Models for the CGCV Flow Engine
========================================

Validated configuration records and report types shared by every module.
"""

from typing import Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, Field, validator

from cgcv.tensor_core import Precision

GateMode = Literal["sigmoid", "softmax", "none"]
MotionKind = Literal["translation", "affine"]


def _split_ints(v):
    """Accept '16,24' strings from config files as integer lists"""
    if isinstance(v, str):
        return [int(part) for part in v.replace(" ", "").split(",") if part]
    return v


def _split_floats(v):
    if isinstance(v, str):
        return [float(part) for part in v.replace(",", " ").split()]
    return v


# ============================================
# ENCODER MODELS
# ============================================

class EncoderConfig(BaseModel):
    """Toy convolutional encoder: stride-s conv stages reducing resolution by 8"""
    in_channels: int = Field(3, ge=1, description="Image channels")
    hidden_widths: List[int] = Field(default_factory=lambda: [32, 64], description="Widths of the inner stages")
    out_channels: int = Field(..., ge=1, description="n for matching, 2t for context")
    kernel_size: int = Field(3, ge=1, description="Square kernel size of every stage")
    stride: int = Field(2, ge=2, description="Stride of every stage")
    seed: int = Field(0, description="Weight initialization seed")

    @validator("hidden_widths", pre=True)
    def widths_from_text(cls, v):
        return _split_ints(v)

    @validator("hidden_widths")
    def widths_must_be_positive(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("Layer widths must be positive")
        return v

    @validator("stride")
    def stack_must_reduce_by_eight(cls, v, values):
        widths = values.get("hidden_widths")
        if widths is not None and v ** (len(widths) + 1) != 8:
            raise ValueError(f"stride {v} over {len(widths) + 1} stages does not reduce resolution by 8")
        return v

    class Config:
        json_schema_extra = {
            "example": {
                "in_channels": 3,
                "hidden_widths": [32, 64],
                "out_channels": 256,
                "kernel_size": 3,
                "stride": 2,
                "seed": 0
            }
        }


# ============================================
# CORRELATION MODELS
# ============================================

class LookupConfig(BaseModel):
    """Radius-bounded lookup window over the correlation pyramid"""
    radius: int = Field(4, ge=0, description="Window half-width in grid cells, per level")
    num_levels: int = Field(4, ge=1, description="Pyramid depth")

    @property
    def length(self) -> int:
        """Correlation feature channels per reference cell"""
        return self.num_levels * (2 * self.radius + 1) ** 2

    class Config:
        json_schema_extra = {"example": {"radius": 4, "num_levels": 4}}


class GateConfig(BaseModel):
    """Cross-frame attention gate and context lift"""
    context_dim: int = Field(128, ge=1, description="t: channels of each net/inp half")
    attn_dim: int = Field(128, ge=1, description="d: query/key feature length")
    gate_mode: GateMode = Field("sigmoid", description="Attention normalization, or none to skip gating")
    lift_enabled: bool = Field(True, description="Add the lambda-weighted context correlation")
    seed: int = Field(0, description="Wq/Wk initialization seed")

    class Config:
        json_schema_extra = {
            "example": {
                "context_dim": 128,
                "attn_dim": 128,
                "gate_mode": "sigmoid",
                "lift_enabled": True,
                "seed": 0
            }
        }


# ============================================
# REFINEMENT MODELS
# ============================================

class RefineConfig(BaseModel):
    """ConvGRU refinement loop"""
    iterations: int = Field(8, ge=1, description="GRU updates per frame pair")
    hidden_channels: int = Field(128, ge=1, description="Hidden state channels (equals t)")
    input_channels: int = Field(128, ge=1, description="Channels of the inp context half")
    corr_channels: int = Field(324, ge=1, description="Lookup feature length")
    gru_kernel_size: int = Field(3, ge=1, description="Kernel of the GRU gate convolutions")
    head_kernel_size: int = Field(3, ge=1, description="Kernel of the flow head")
    detach_flow: bool = Field(True, description="Stop gradients through lookup coordinates")
    seed: int = Field(0, description="GRU initialization seed")

    @validator("gru_kernel_size", "head_kernel_size")
    def kernel_must_be_odd(cls, v):
        if v % 2 == 0:
            raise ValueError("Kernel sizes must be odd to keep the grid size")
        return v

    class Config:
        json_schema_extra = {
            "example": {
                "iterations": 8,
                "hidden_channels": 128,
                "input_channels": 128,
                "corr_channels": 324,
                "gru_kernel_size": 3,
                "head_kernel_size": 3,
                "detach_flow": True,
                "seed": 0
            }
        }


class FlowConfig(BaseModel):
    """Whole-network configuration; defaults follow the full-scale settings"""
    matching_channels: int = Field(256, ge=1, description="n: matching feature length")
    context_channels: int = Field(256, ge=2, description="2t: context length split into net/inp")
    attn_dim: int = Field(128, ge=1, description="d: query/key length")
    encoder_widths: List[int] = Field(default_factory=lambda: [32, 64], description="Inner encoder stage widths")
    radius: int = Field(4, ge=0)
    levels: int = Field(4, ge=1)
    iterations: int = Field(8, ge=1)
    gate_mode: GateMode = "sigmoid"
    lift_enabled: bool = True
    gru_kernel_size: int = Field(3, ge=1)
    detach_flow: bool = True
    precision: Precision = Precision.SINGLE
    seed: int = 0

    @validator("encoder_widths", pre=True)
    def widths_from_text(cls, v):
        return _split_ints(v)

    @validator("lift_enabled", "detach_flow", pre=True)
    def flags_from_text(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("on", "off"):
            return v.strip().lower() == "on"
        return v

    @validator("context_channels")
    def context_must_split(cls, v):
        if v % 2:
            raise ValueError("Context channels must be even to split into net/inp")
        return v

    @classmethod
    def toy(cls, **overrides) -> "FlowConfig":
        """Desk-scale preset used for synthetic training runs"""
        values = dict(matching_channels=32, context_channels=32, attn_dim=16,
                      encoder_widths=[16, 24], radius=3, levels=3, iterations=8)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def gradcheck(cls, **overrides) -> "FlowConfig":
        """Tiny double-precision preset for finite-difference checks"""
        values = dict(matching_channels=4, context_channels=4, attn_dim=3,
                      encoder_widths=[2, 2], radius=1, levels=2, iterations=2,
                      gru_kernel_size=1, detach_flow=False, precision=Precision.DOUBLE)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "FlowConfig":
        known = {k: v for k, v in values.items() if k in cls.model_fields}
        return cls(**known)

    @property
    def context_dim(self) -> int:
        return self.context_channels // 2

    @property
    def grid_multiple(self) -> int:
        """Image size multiple that keeps every pyramid level integral"""
        return 8 * 2 ** (self.levels - 1)

    def matching_encoder(self) -> EncoderConfig:
        return EncoderConfig(hidden_widths=self.encoder_widths, out_channels=self.matching_channels,
                             seed=self.seed)

    def context_encoder(self) -> EncoderConfig:
        return EncoderConfig(hidden_widths=self.encoder_widths, out_channels=self.context_channels,
                             seed=self.seed + 1)

    def gate(self) -> GateConfig:
        return GateConfig(context_dim=self.context_dim, attn_dim=self.attn_dim, gate_mode=self.gate_mode,
                          lift_enabled=self.lift_enabled, seed=self.seed + 2)

    def lookup(self) -> LookupConfig:
        return LookupConfig(radius=self.radius, num_levels=self.levels)

    def refine(self) -> RefineConfig:
        return RefineConfig(iterations=self.iterations, hidden_channels=self.context_dim,
                            input_channels=self.context_dim, corr_channels=self.lookup().length,
                            gru_kernel_size=self.gru_kernel_size, detach_flow=self.detach_flow,
                            seed=self.seed + 3)

    def to_mapping(self) -> Dict[str, object]:
        values = self.model_dump()
        values["precision"] = self.precision.value
        return values

    class Config:
        json_schema_extra = {
            "example": {
                "matching_channels": 256,
                "context_channels": 256,
                "attn_dim": 128,
                "encoder_widths": [32, 64],
                "radius": 4,
                "levels": 4,
                "iterations": 8,
                "gate_mode": "sigmoid",
                "lift_enabled": True,
                "precision": "single",
                "seed": 0
            }
        }


# ============================================
# TRAINING MODELS
# ============================================

class TrainConfig(BaseModel):
    """Plain gradient descent on the sequence endpoint-error loss"""
    epochs: int = Field(200, ge=0)
    lr: float = Field(1e-3, ge=0)
    gamma: float = Field(0.8, gt=0, le=1, description="Per-iteration loss decay")
    clip_grad_norm: Optional[float] = Field(None, gt=0, description="Opt-in global gradient norm cap (None = off)")
    log_every: int = Field(20, ge=1)

    @validator("clip_grad_norm", pre=True)
    def clip_off_from_text(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none", "off"):
            return None
        return v

    class Config:
        json_schema_extra = {
            "example": {"epochs": 200, "lr": 0.001, "gamma": 0.8, "clip_grad_norm": None, "log_every": 20}
        }


# ============================================
# SYNTHETIC DATA MODELS
# ============================================

class SynthSpec(BaseModel):
    """Synthetic pair with exact ground-truth motion"""
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    seed: int = 0
    motion: MotionKind = "translation"
    dx: float = 0.0
    dy: float = 0.0
    affine: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                                description="Row-major 2x3 map from reference to target pixel coords")
    duplicate_patch: bool = False
    patch_size: int = Field(16, ge=2)

    @validator("affine", pre=True)
    def affine_from_text(cls, v):
        return _split_floats(v)

    @validator("affine")
    def affine_must_be_2x3(cls, v):
        if len(v) != 6:
            raise ValueError("Affine motion needs 6 coefficients (2x3 row-major)")
        return v

    @validator("duplicate_patch", pre=True)
    def flag_from_text(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("on", "off"):
            return v.strip().lower() == "on"
        return v

    class Config:
        json_schema_extra = {
            "example": {
                "width": 64,
                "height": 64,
                "seed": 7,
                "motion": "translation",
                "dx": 8.0,
                "dy": 0.0,
                "duplicate_patch": False
            }
        }


# ============================================
# GRADIENT CHECK MODELS
# ============================================

class GradReport(BaseModel):
    """Finite-difference comparison for one named parameter"""
    name: str
    max_rel: float = Field(..., ge=0)
    max_abs: float = Field(..., ge=0)
    passed: bool

    def line(self) -> str:
        return f"{self.name} {self.max_rel:.3e} {self.max_abs:.3e} {'PASS' if self.passed else 'FAIL'}"

    class Config:
        json_schema_extra = {
            "example": {"name": "gate.wq", "max_rel": 3.1e-9, "max_abs": 2.0e-12, "passed": True}
        }


# ============================================
# ABLATION MODELS
# ============================================

class AblationRow(BaseModel):
    """Outcome of training one ablation variant"""
    name: str
    gate_mode: GateMode
    lift_enabled: bool
    initial_loss: float
    final_loss: float
    aepe: float = Field(..., ge=0, description="Mean endpoint error over the dataset after training")
    lam: Optional[float] = Field(None, description="Learned lambda, None when lifting is off")

    def line(self) -> str:
        lam = "-" if self.lam is None else f"{self.lam:.3e}"
        return (f"{self.name:<14} gate={self.gate_mode:<8} lift={'on' if self.lift_enabled else 'off':<3} "
                f"loss {self.initial_loss:.4f} -> {self.final_loss:.4f}  aepe {self.aepe:.4f}  lambda {lam}")

    class Config:
        json_schema_extra = {
            "example": {
                "name": "full",
                "gate_mode": "sigmoid",
                "lift_enabled": True,
                "initial_loss": 9.1,
                "final_loss": 3.2,
                "aepe": 1.4,
                "lam": 0.012
            }
        }
