"""
Toy Training and Evaluation
===========================

Endpoint-error metrics, the decaying sequence loss, a plain gradient
descent loop over synthetic pairs and the ablation sweep.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import torch

from cgcv.errors import DimensionError, EvaluationError
from cgcv.models import AblationRow, FlowConfig, GateMode, TrainConfig
from cgcv.network import CGCVFlowNet
from cgcv.synth import FlowSample
from cgcv.tensor_core import all_finite

logger = logging.getLogger(__name__)

LAMBDA_EXPECTED_RANGE = (1e-3, 1e-1)

ABLATION_ROWS: Tuple[Tuple[str, GateMode, bool], ...] = (
    ("full", "sigmoid", True),
    ("no-lift", "sigmoid", False),
    ("softmax", "softmax", True),
    ("no-attention", "none", True),
    ("traditional", "none", False),
)


# ============================================
# METRICS
# ============================================

def endpoint_error(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel Euclidean distance between (2, H, W) flows"""
    if pred.shape != gt.shape or pred.dim() != 3 or pred.shape[0] != 2:
        raise DimensionError(f"flows must both be (2, H, W), got {tuple(pred.shape)} and {tuple(gt.shape)}")
    return torch.sqrt(((pred - gt.to(pred.dtype)) ** 2).sum(dim=0))


def aepe(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Average endpoint error"""
    return float(endpoint_error(pred, gt).mean())


def f1_all(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Percentage of pixels with EPE > 3 px and > 5% of the ground-truth magnitude"""
    epe = endpoint_error(pred, gt)
    magnitude = torch.sqrt((gt.to(pred.dtype) ** 2).sum(dim=0))
    outliers = (epe > 3.0) & (epe > 0.05 * magnitude)
    return 100.0 * float(outliers.to(torch.float64).mean())


def sequence_loss(predictions: Sequence[torch.Tensor], gt: torch.Tensor, gamma: float = 0.8) -> torch.Tensor:
    """Mean EPE of every iteration, weighted gamma**(N - 1 - i)"""
    n = len(predictions)
    if n == 0:
        raise DimensionError("sequence loss needs at least one prediction")
    loss = predictions[0].new_zeros(())
    for index, pred in enumerate(predictions):
        loss = loss + gamma ** (n - 1 - index) * endpoint_error(pred, gt).mean()
    return loss


# ============================================
# TRAINING
# ============================================

def dataset_loss(model: CGCVFlowNet, dataset: Sequence[FlowSample], gamma: float) -> torch.Tensor:
    losses = [sequence_loss(model(sample.pair), sample.flow, gamma) for sample in dataset]
    return torch.stack(losses).mean()


def evaluate_dataset(model: CGCVFlowNet, dataset: Sequence[FlowSample]) -> float:
    """Mean AEPE of the final prediction over a dataset"""
    errors = [aepe(model.estimate(sample.pair), sample.flow) for sample in dataset]
    return sum(errors) / len(errors)


def report_lambda(model: CGCVFlowNet) -> Optional[float]:
    """Log the learned lambda; warn when it leaves the expected magnitude range"""
    if not model.cfg.lift_enabled:
        return None
    lam = float(model.gate.lam.detach())
    low, high = LAMBDA_EXPECTED_RANGE
    if low <= abs(lam) <= high:
        logger.info(f"learned lambda = {lam:.3e}")
    else:
        logger.warning(f"learned lambda = {lam:.3e} is outside [{low:g}, {high:g}] in magnitude")
    return lam


def train_toy(dataset: Sequence[FlowSample], cfg: Optional[FlowConfig] = None,
              train_cfg: Optional[TrainConfig] = None,
              model: Optional[CGCVFlowNet] = None) -> Tuple[CGCVFlowNet, List[float]]:
    """
    Full-batch plain gradient descent on the sequence loss.

    Args:
        dataset: synthetic pairs with ground-truth flow
        cfg: network config (ignored when ``model`` is given)
        train_cfg: epochs, learning rate, gamma and clipping
        model: optional network to continue training

    Returns:
        (trained model, per-epoch loss measured before each update)

    Raises:
        EvaluationError: if the loss becomes non-finite
    """
    if not dataset:
        raise EvaluationError("training needs at least one sample")
    train_cfg = train_cfg or TrainConfig()
    model = model or CGCVFlowNet(cfg or FlowConfig.toy())
    model.train()

    trace: List[float] = []
    for epoch in range(1, train_cfg.epochs + 1):
        model.zero_grad()
        loss = dataset_loss(model, dataset, train_cfg.gamma)
        if not all_finite(loss):
            raise EvaluationError(f"loss became {float(loss)} at epoch {epoch}; aborting")
        trace.append(float(loss))
        loss.backward()

        if train_cfg.clip_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.clip_grad_norm)
        with torch.no_grad():
            for param in model.parameters():
                if param.grad is not None:
                    param -= train_cfg.lr * param.grad

        if epoch == 1 or epoch % train_cfg.log_every == 0 or epoch == train_cfg.epochs:
            logger.info(f"epoch {epoch}/{train_cfg.epochs}: loss {trace[-1]:.4f}")

    model.eval()
    report_lambda(model)
    return model, trace


def run_ablation(dataset: Sequence[FlowSample], cfg: Optional[FlowConfig] = None,
                 train_cfg: Optional[TrainConfig] = None) -> List[AblationRow]:
    """
    Train every ablation variant from identical initial weights and report
    the final loss and AEPE of each.
    """
    cfg = cfg or FlowConfig.toy()
    rows: List[AblationRow] = []
    for name, gate_mode, lift_enabled in ABLATION_ROWS:
        logger.info(f"ablation row {name}: gate={gate_mode} lift={'on' if lift_enabled else 'off'}")
        variant = cfg.model_copy(update={"gate_mode": gate_mode, "lift_enabled": lift_enabled})
        model, trace = train_toy(dataset, variant, train_cfg)
        with torch.no_grad():
            final = float(dataset_loss(model, dataset, (train_cfg or TrainConfig()).gamma))
        rows.append(AblationRow(
            name=name,
            gate_mode=gate_mode,
            lift_enabled=lift_enabled,
            initial_loss=trace[0] if trace else final,
            final_loss=final,
            aepe=evaluate_dataset(model, dataset),
            lam=float(model.gate.lam.detach()) if lift_enabled else None,
        ))
    return rows
