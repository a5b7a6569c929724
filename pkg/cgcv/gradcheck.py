"""
Gradient Check Harness
======================

Central finite differences as an independent oracle for every analytic
gradient in the network: the hand-derived CGCV backward, the encoders and
the refinement GRU.
"""

import logging
from typing import Callable, Dict, List, Mapping, Optional

import torch

from cgcv.config import TOLERANCES
from cgcv.encoders import ImagePair
from cgcv.errors import ContractViolation, EvaluationError
from cgcv.models import FlowConfig, GateMode, GradReport
from cgcv.network import CGCVFlowNet, declared_tensors
from cgcv.tensor_core import all_finite
from cgcv.training import sequence_loss

logger = logging.getLogger(__name__)

# Lambda is moved off zero before checking so the lift branch has a
# non-trivial gradient path into net1/net2
CHECK_LAMBDA = 0.05
# Encoder biases start at zero, which puts every all-dead ReLU window exactly
# on the kink; the check gives them seeded magnitudes in this range
CHECK_BIAS_RANGE = (0.05, 0.15)
CHECK_IMAGE_SIZE = 16


def finite_diff(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor,
                step: float = TOLERANCES.fd_step,
                indices: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Central-difference gradient of ``loss_fn`` with respect to ``param``.

    ``param`` is perturbed in place one coordinate at a time and restored.
    Coordinates outside ``indices`` (flat positions) are left at zero.

    Raises:
        ContractViolation: if ``param`` is not double precision or step <= 0
        EvaluationError: if the loss is not finite at a perturbed point
    """
    if param.dtype != torch.float64:
        raise ContractViolation(f"finite differences need double precision, got {param.dtype}")
    if step <= 0:
        raise ContractViolation(f"step must be positive, got {step}")

    flat = param.data.view(-1)
    if indices is None:
        indices = torch.arange(flat.numel())
    grad = torch.zeros(flat.numel(), dtype=torch.float64)

    def evaluate() -> float:
        with torch.no_grad():
            loss = loss_fn()
        if not all_finite(loss):
            raise EvaluationError(f"non-finite loss {float(loss)} during finite differences")
        return float(loss)

    for index in indices.tolist():
        original = float(flat[index])
        flat[index] = original + step
        plus = evaluate()
        flat[index] = original - step
        minus = evaluate()
        flat[index] = original
        grad[index] = (plus - minus) / (2.0 * step)

    return grad.view(param.shape)


def compare_gradients(name: str, analytic: torch.Tensor, numeric: torch.Tensor,
                      indices: torch.Tensor) -> GradReport:
    """
    A coordinate passes when its relative error is within rtol, or when the
    analytic value is tiny and the absolute error is within atol.
    """
    a = analytic.reshape(-1)[indices].to(torch.float64)
    n = numeric.reshape(-1)[indices].to(torch.float64)
    abs_err = (a - n).abs()
    denom = torch.maximum(a.abs(), n.abs())
    rel_err = torch.where(denom > 0, abs_err / denom.clamp(min=torch.finfo(torch.float64).tiny),
                          torch.zeros_like(abs_err))

    ok = (rel_err <= TOLERANCES.gradcheck_rtol) | (
        (a.abs() < TOLERANCES.gradcheck_tiny_grad) & (abs_err <= TOLERANCES.gradcheck_atol))
    return GradReport(
        name=name,
        max_rel=float(rel_err.max()) if rel_err.numel() else 0.0,
        max_abs=float(abs_err.max()) if abs_err.numel() else 0.0,
        passed=bool(ok.all()),
    )


def sample_indices(numel: int, generator: torch.Generator,
                   max_coords: int = TOLERANCES.fd_max_coords) -> torch.Tensor:
    """All coordinates of small tensors, a seeded subset of large ones"""
    if numel <= max_coords:
        return torch.arange(numel)
    return torch.randperm(numel, generator=generator)[:max_coords].sort().values


def offset_encoder_biases(model: CGCVFlowNet, seed: int) -> None:
    """Give every encoder bias a seeded nonzero value of random sign"""
    generator = torch.Generator().manual_seed(seed)
    low, high = CHECK_BIAS_RANGE
    with torch.no_grad():
        for encoder in (model.fnet, model.cnet):
            for conv in encoder.stages:
                shape = conv.bias.shape
                magnitude = low + (high - low) * torch.rand(shape, generator=generator, dtype=torch.float64)
                sign = 1.0 - 2.0 * (torch.rand(shape, generator=generator) < 0.5).to(torch.float64)
                conv.bias.copy_((magnitude * sign).to(conv.bias.dtype))


def random_problem(seed: int, size: int = CHECK_IMAGE_SIZE,
                   dtype: torch.dtype = torch.float64):
    """Random frame pair and random target flow for a gradient check"""
    generator = torch.Generator().manual_seed(seed)
    reference = torch.rand(size, size, 3, generator=generator, dtype=dtype)
    target = torch.rand(size, size, 3, generator=generator, dtype=dtype)
    flow = (torch.rand(2, size, size, generator=generator, dtype=dtype) * 2 - 1) * 4
    return ImagePair(reference=reference, target=target), flow


def check_all(cfg: Optional[FlowConfig] = None, seed: int = 0,
              gate_mode: Optional[GateMode] = None,
              analytic_scale: Optional[Mapping[str, float]] = None) -> List[GradReport]:
    """
    Compare analytic and finite-difference gradients of the sequence loss
    for every learnable tensor of a freshly initialized network.

    Args:
        cfg: network config; defaults to the tiny double-precision preset
        seed: seeds both the weights and the random problem
        gate_mode: optional override of the config's gate mode
        analytic_scale: name -> factor applied to that analytic gradient
            before comparing; used to confirm the harness catches errors

    Returns:
        one GradReport per parameter, in parameter order
    """
    cfg = cfg or FlowConfig.gradcheck()
    overrides: Dict[str, object] = {"seed": seed}
    if gate_mode is not None:
        overrides["gate_mode"] = gate_mode
    cfg = cfg.model_copy(update=overrides)
    if cfg.precision.dtype != torch.float64:
        raise ContractViolation("gradient checks run in double precision only")

    model = CGCVFlowNet(cfg)
    with torch.no_grad():
        model.gate.lam.fill_(CHECK_LAMBDA)
    offset_encoder_biases(model, seed)
    pair, target_flow = random_problem(seed)

    def loss_fn() -> torch.Tensor:
        return sequence_loss(model(pair), target_flow)

    model.zero_grad()
    loss_fn().backward()

    names = [name for name, _ in model.named_parameters()]
    declared = declared_tensors(cfg)
    if names != declared:
        raise ContractViolation(f"network parameters {names} differ from declared tensors {declared}")

    scale = dict(analytic_scale or {})
    unknown = set(scale) - set(names)
    if unknown:
        raise ContractViolation(f"analytic_scale names unknown parameters: {sorted(unknown)}")

    generator = torch.Generator().manual_seed(seed)
    reports: List[GradReport] = []
    for name, param in model.named_parameters():
        analytic = param.grad if param.grad is not None else torch.zeros_like(param)
        analytic = analytic.detach().clone() * scale.get(name, 1.0)
        indices = sample_indices(param.numel(), generator)
        numeric = finite_diff(loss_fn, param, indices=indices)
        report = compare_gradients(name, analytic, numeric, indices)
        logger.debug(report.line())
        reports.append(report)

    failed = [r.name for r in reports if not r.passed]
    logger.info(f"gradcheck seed={seed} gate={cfg.gate_mode}: "
                f"{len(reports) - len(failed)}/{len(reports)} passed"
                + (f", failing: {', '.join(failed)}" if failed else ""))
    return reports
