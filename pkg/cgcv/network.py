"""
Flow Network
============

Wires the toy encoders, the context guided volume, the correlation pyramid
and the refinement loop into one module. The volume is built once per
frame pair; refinement iterations only sample it.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn

from cgcv.config import read_config_file, write_config_file
from cgcv.context_volume import ContextBundle, GateParams, context_guided_volume
from cgcv.corr_engine import CorrPyramid, build_pyramid
from cgcv.encoders import ImagePair, PadRecord, ToyEncoder, encode_context, encode_matching, pad_to_grid
from cgcv.errors import ConfigurationError, ContractViolation, DimensionError
from cgcv.io_formats import load_checkpoint, save_checkpoint
from cgcv.models import FlowConfig
from cgcv.refine import UpdateBlock, refine_iterates

logger = logging.getLogger(__name__)

GATE_TENSORS = ("gate.wq", "gate.wk", "gate.lam")
GRU_GATES = ("convz", "convr", "convq")


def declared_tensors(cfg: FlowConfig) -> List[str]:
    """
    Checkpoint tensor names implied by a config, in checkpoint order: both
    encoders stage by stage, the gate, then the GRU and flow head.
    """
    stages = len(cfg.encoder_widths) + 1
    names: List[str] = []
    for encoder in ("fnet", "cnet"):
        for s in range(stages):
            names += [f"{encoder}.stages.{s}.weight", f"{encoder}.stages.{s}.bias"]
    names += GATE_TENSORS
    for conv in GRU_GATES:
        names += [f"update.gru.{conv}.weight", f"update.gru.{conv}.bias"]
    names += ["update.flow_head.weight", "update.flow_head.bias"]
    return names


@dataclass
class PairFeatures:
    """Everything the refinement loop needs for one frame pair"""
    g1: torch.Tensor
    g2: torch.Tensor
    ctx: ContextBundle
    pyramid: CorrPyramid
    pad: PadRecord


class CGCVFlowNet(nn.Module):
    """Matching/context encoders + CGCV + ConvGRU refinement"""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.fnet = ToyEncoder(cfg.matching_encoder())
        self.cnet = ToyEncoder(cfg.context_encoder())
        self.gate = GateParams(cfg.gate())
        self.update = UpdateBlock(cfg.refine())
        self.to(dtype=cfg.precision.dtype)
        logger.debug(f"CGCVFlowNet with {sum(p.numel() for p in self.parameters())} parameters "
                     f"(gate={cfg.gate_mode}, lift={'on' if cfg.lift_enabled else 'off'})")

    def pad(self, pair: ImagePair) -> Tuple[ImagePair, PadRecord]:
        """Cast to the network precision and pad to the pyramid grid multiple"""
        dtype = self.cfg.precision.dtype
        reference, pad = pad_to_grid(pair.reference.to(dtype), self.cfg.grid_multiple)
        target, _ = pad_to_grid(pair.target.to(dtype), self.cfg.grid_multiple)
        return ImagePair(reference=reference, target=target), pad

    def encode(self, pair: ImagePair) -> Tuple[torch.Tensor, torch.Tensor, ContextBundle, PadRecord]:
        """Matching features of both frames and the Siamese context bundle"""
        padded, pad = self.pad(pair)
        g1 = encode_matching(padded.reference, self.fnet)
        g2 = encode_matching(padded.target, self.fnet)
        return g1, g2, encode_context(padded, self.cnet), pad

    def prepare(self, pair: ImagePair) -> PairFeatures:
        """Encode both frames and build the pyramid from V"""
        g1, g2, ctx, pad = self.encode(pair)
        volume = context_guided_volume(g1, g2, ctx, self.gate)
        pyramid = build_pyramid(volume, self.cfg.levels)
        return PairFeatures(g1=g1, g2=g2, ctx=ctx, pyramid=pyramid, pad=pad)

    def forward(self, pair: ImagePair) -> List[torch.Tensor]:
        """Full-resolution (2, H, W) predictions, one per iteration"""
        features = self.prepare(pair)
        return list(refine_iterates(features.ctx, features.pyramid, self.update,
                                    self.cfg.lookup(), features.pad))

    def estimate(self, pair: ImagePair) -> torch.Tensor:
        """Final full-resolution flow, no gradients"""
        with torch.no_grad():
            return self.forward(pair)[-1]

    def tensor_table(self) -> Dict[str, torch.Tensor]:
        """
        Named learnable tensors, in checkpoint order.

        Raises:
            ContractViolation: if the module's parameters drift from the
                tensor list its config declares
        """
        own = dict(self.named_parameters())
        declared = declared_tensors(self.cfg)
        if list(own) != declared:
            raise ContractViolation(f"network parameters {sorted(own)} differ from declared tensors {declared}")
        return own

    def load_tensor_table(self, table: Dict[str, torch.Tensor]) -> None:
        """
        Copy a checkpoint table into the parameters.

        Raises:
            ConfigurationError: if the names differ from the declared tensors
            DimensionError: if a tensor shape differs
        """
        own = self.tensor_table()
        declared = set(own)
        missing, unexpected = declared - set(table), set(table) - declared
        if missing or unexpected:
            raise ConfigurationError(f"checkpoint does not match the network: missing {sorted(missing)}, "
                                     f"unexpected {sorted(unexpected)}")
        with torch.no_grad():
            for name, param in own.items():
                if tuple(table[name].shape) != tuple(param.shape):
                    raise DimensionError(f"{name}: checkpoint shape {tuple(table[name].shape)} "
                                         f"!= network shape {tuple(param.shape)}")
                param.copy_(table[name].to(param.dtype))
        logger.debug(f"loaded {len(own)} tensors into CGCVFlowNet")


# ============================================
# CHECKPOINTS
# ============================================

def sidecar_path(checkpoint: Union[str, Path]) -> Path:
    """``w.cgck`` -> ``w.cgck.conf``"""
    return Path(f"{checkpoint}.conf")


def save_model(model: CGCVFlowNet, path: Union[str, Path]) -> None:
    """Write the tensor table and its network config sidecar"""
    save_checkpoint(path, model.tensor_table())
    write_config_file(sidecar_path(path), model.cfg.to_mapping())


def load_model(path: Union[str, Path], overrides: Optional[Mapping[str, object]] = None) -> CGCVFlowNet:
    """
    Rebuild a network from a checkpoint. The sidecar config is the base;
    ``overrides`` (e.g. iterations, gate mode) are applied on top.
    """
    values: Dict[str, object] = {}
    conf = sidecar_path(path)
    if conf.is_file():
        values.update(read_config_file(conf))
    else:
        logger.warning(f"no config sidecar next to {path}; using toy defaults")
        values.update(FlowConfig.toy().to_mapping())
    values.update(overrides or {})
    model = CGCVFlowNet(FlowConfig.from_mapping(values))
    model.load_tensor_table(load_checkpoint(path))
    logger.info(f"Loaded checkpoint {path}")
    return model
