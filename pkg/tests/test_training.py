"""
Unit Tests for Metrics, Toy Training and Ablations
==================================================
"""

import copy
import logging

import pytest
import torch

from cgcv.errors import DimensionError, EvaluationError
from cgcv.models import AblationRow, FlowConfig, TrainConfig
from cgcv.network import CGCVFlowNet
from cgcv.synth import FlowSample, synth_pair, translation_specs
from cgcv.training import (
    ABLATION_ROWS, aepe, dataset_loss, endpoint_error, evaluate_dataset, f1_all, report_lambda, run_ablation,
    sequence_loss, train_toy,
)


def constant_flow(u: float, v: float, h=4, w=4) -> torch.Tensor:
    return torch.stack([torch.full((h, w), u), torch.full((h, w), v)]).double()


def tiny_dataset(count=2):
    specs = translation_specs(count, seed=1, max_shift=3, width=16, height=16)
    return [FlowSample(*synth_pair(spec)) for spec in specs]


class TestMetrics:
    """Test endpoint-error metrics"""

    def test_endpoint_error(self):
        epe = endpoint_error(constant_flow(3.0, 4.0), constant_flow(0.0, 0.0))
        assert epe.shape == (4, 4)
        assert bool((epe == 5.0).all())

    def test_aepe_mean(self):
        pred = constant_flow(0.0, 0.0)
        pred[0, :2] = 2.0
        assert aepe(pred, constant_flow(0.0, 0.0)) == pytest.approx(1.0)

    def test_f1_all_thresholds(self):
        gt = constant_flow(100.0, 0.0)
        pred = gt.clone()
        pred[0, 0, 0] += 4.0   # > 3 px but < 5% of 100
        pred[0, 0, 1] += 6.0   # > 3 px and > 5%
        pred[0, 0, 2] += 2.0   # < 3 px
        assert f1_all(pred, gt) == pytest.approx(100.0 / 16)

    def test_perfect_prediction(self):
        gt = constant_flow(1.0, -2.0)
        assert aepe(gt, gt) == 0.0
        assert f1_all(gt, gt) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            endpoint_error(constant_flow(0, 0, h=4), constant_flow(0, 0, h=5))


class TestSequenceLoss:
    """Test the decaying per-iteration weights"""

    def test_weights(self):
        gt = constant_flow(0.0, 0.0)
        predictions = [constant_flow(1.0, 0.0), constant_flow(2.0, 0.0), constant_flow(3.0, 0.0)]
        loss = sequence_loss(predictions, gt, gamma=0.8)
        assert float(loss) == pytest.approx(0.64 * 1 + 0.8 * 2 + 1.0 * 3)

    def test_single_prediction_is_aepe(self):
        pred, gt = constant_flow(0.5, 0.0), constant_flow(0.0, 0.0)
        assert float(sequence_loss([pred], gt)) == pytest.approx(aepe(pred, gt))

    def test_empty(self):
        with pytest.raises(DimensionError):
            sequence_loss([], constant_flow(0.0, 0.0))

    def test_differentiable(self):
        pred = constant_flow(1.0, 1.0).requires_grad_(True)
        sequence_loss([pred], constant_flow(0.0, 0.0)).backward()
        assert pred.grad is not None


class TestTrainToy:
    """Test the gradient descent loop"""

    def test_zero_learning_rate_keeps_loss(self):
        _, trace = train_toy(tiny_dataset(), FlowConfig.gradcheck(), TrainConfig(epochs=3, lr=0.0))
        assert len(trace) == 3
        assert trace[0] == trace[1] == trace[2]

    def test_parameters_move(self):
        model = CGCVFlowNet(FlowConfig.gradcheck())
        before = model.update.flow_head.weight.detach().clone()
        train_toy(tiny_dataset(1), train_cfg=TrainConfig(epochs=1, lr=1e-2), model=model)
        assert not torch.equal(model.update.flow_head.weight, before)

    def test_plain_step_by_default(self):
        """Without opt-in clipping one epoch is exactly w - lr * grad"""
        dataset = tiny_dataset(1)
        model = CGCVFlowNet(FlowConfig.gradcheck())
        reference = copy.deepcopy(model)
        dataset_loss(reference, dataset, 0.8).backward()
        grad = reference.update.flow_head.weight.grad
        expected = reference.update.flow_head.weight.detach() - 0.5 * grad

        train_toy(dataset, train_cfg=TrainConfig(epochs=1, lr=0.5), model=model)
        torch.testing.assert_close(model.update.flow_head.weight.detach(), expected)
        assert float(grad.norm()) > 0

    def test_clipping_is_opt_in(self):
        dataset = tiny_dataset(1)
        model = CGCVFlowNet(FlowConfig.gradcheck())
        before = model.update.flow_head.weight.detach().clone()
        train_toy(dataset, train_cfg=TrainConfig(epochs=1, lr=0.5, clip_grad_norm=1e-12), model=model)
        torch.testing.assert_close(model.update.flow_head.weight.detach(), before, rtol=0, atol=1e-11)

    def test_zero_epochs(self):
        model, trace = train_toy(tiny_dataset(1), FlowConfig.gradcheck(), TrainConfig(epochs=0))
        assert trace == []
        assert not model.training

    def test_nan_loss_aborts(self):
        dataset = tiny_dataset(1)
        broken = FlowSample(dataset[0].pair, torch.full_like(dataset[0].flow, float("nan")))
        with pytest.raises(EvaluationError) as exc_info:
            train_toy([broken], FlowConfig.gradcheck(), TrainConfig(epochs=2))
        assert "epoch 1" in str(exc_info.value)

    def test_empty_dataset(self):
        with pytest.raises(EvaluationError):
            train_toy([], FlowConfig.gradcheck())

    def test_evaluate_dataset(self):
        model = CGCVFlowNet(FlowConfig.gradcheck())
        assert evaluate_dataset(model, tiny_dataset()) >= 0.0


class TestReportLambda:
    """Test the learned lambda report"""

    def model_with(self, lam: float, lift=True) -> CGCVFlowNet:
        model = CGCVFlowNet(FlowConfig.gradcheck(lift_enabled=lift))
        with torch.no_grad():
            model.gate.lam.fill_(lam)
        return model

    def test_in_range(self, caplog):
        with caplog.at_level(logging.INFO):
            assert report_lambda(self.model_with(0.01)) == pytest.approx(0.01)
        assert "outside" not in caplog.text

    def test_out_of_range_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            report_lambda(self.model_with(0.5))
        assert "outside" in caplog.text

    def test_lift_disabled(self):
        assert report_lambda(self.model_with(0.01, lift=False)) is None


class TestAblation:
    """Test the ablation sweep"""

    def test_rows(self):
        rows = run_ablation(tiny_dataset(1), FlowConfig.gradcheck(), TrainConfig(epochs=1, lr=1e-3))
        assert [r.name for r in rows] == [name for name, _, _ in ABLATION_ROWS]
        by_name = {r.name: r for r in rows}
        assert by_name["traditional"].gate_mode == "none"
        assert by_name["traditional"].lam is None
        assert by_name["full"].lam is not None
        assert all(r.aepe >= 0 for r in rows)

    def test_row_line(self):
        row = AblationRow(name="no-lift", gate_mode="sigmoid", lift_enabled=False,
                          initial_loss=2.0, final_loss=1.0, aepe=0.5)
        line = row.line()
        assert line.startswith("no-lift")
        assert "lift=off" in line
        assert line.endswith("lambda -")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
