"""
Unit Tests for the Context Guided Correlation Volume
====================================================

Gating, lifting, the fused path and its hand-derived backward pass.
"""

import math

import pytest
import torch

from cgcv.config import TOLERANCES
from cgcv.context_volume import (
    ContextBundle, GateParams, QKMaps, assemble, backward_assemble, context_correlation,
    context_guided_volume, cross_attention, forward_assemble, gate, project_qk,
)
from cgcv.corr_engine import KERNEL_COUNTER, argmax_plane, build_all_pairs
from cgcv.errors import ContractViolation, DimensionError
from cgcv.models import GateConfig
from tests import oracles


def make_problem(seed: int, n=4, t=3, d=2, h1=3, w1=2, h2=2, w2=3, gate_mode="sigmoid", lift=True, lam=0.3):
    """Random double-precision features, context bundle and gate parameters"""
    generator = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    g1, g2 = randn(n, h1, w1), randn(n, h2, w2)
    ctx = ContextBundle(net1=randn(t, h1, w1), inp1=randn(t, h1, w1), net2=randn(t, h2, w2), inp2=randn(t, h2, w2))
    params = GateParams(GateConfig(context_dim=t, attn_dim=d, gate_mode=gate_mode, lift_enabled=lift, seed=seed))
    params = params.to(torch.float64)
    with torch.no_grad():
        params.lam.fill_(lam)
    return g1, g2, ctx, params


class TestContextBundle:
    """Test net/inp splitting"""

    def test_split_halves(self):
        c1 = torch.arange(16.0).reshape(4, 2, 2)
        c2 = -c1
        bundle = ContextBundle.split(c1, c2)
        assert torch.equal(bundle.net1, c1[:2])
        assert torch.equal(bundle.inp1, c1[2:])
        assert torch.equal(bundle.net2, c2[:2])
        assert bundle.context_dim == 2

    def test_odd_channels_rejected(self):
        with pytest.raises(DimensionError):
            ContextBundle.split(torch.zeros(3, 2, 2), torch.zeros(3, 2, 2))

    def test_mismatched_grids_rejected(self):
        with pytest.raises(DimensionError):
            ContextBundle(net1=torch.zeros(2, 2, 2), inp1=torch.zeros(2, 3, 3),
                          net2=torch.zeros(2, 2, 2), inp2=torch.zeros(2, 2, 2))


class TestGateParams:
    """Test gate parameter initialization"""

    def test_shapes_and_lambda_init(self):
        params = GateParams(GateConfig(context_dim=8, attn_dim=4))
        assert params.wq.shape == (4, 8)
        assert params.wk.shape == (4, 8)
        assert float(params.lam) == 0.0

    def test_weights_bounded(self):
        params = GateParams(GateConfig(context_dim=16, attn_dim=4))
        assert float(params.wq.abs().max()) <= 1 / math.sqrt(16)

    def test_seeded(self):
        a = GateParams(GateConfig(context_dim=4, attn_dim=4, seed=9))
        b = GateParams(GateConfig(context_dim=4, attn_dim=4, seed=9))
        assert torch.equal(a.wq, b.wq)


class TestCrossAttention:
    """Test query/key projection and attention"""

    @pytest.mark.parametrize("mode", ["sigmoid", "softmax"])
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, mode, seed):
        _, _, ctx, params = make_problem(seed, t=4, d=3, h1=3, w1=3, h2=3, w2=2)
        out = cross_attention(project_qk(ctx, params), mode)
        expected = oracles.cross_attention(ctx.net1, ctx.net2, params.wq.detach(), params.wk.detach(), mode)
        torch.testing.assert_close(out.detach(), expected, rtol=TOLERANCES.oracle_rtol_single, atol=1e-12)

    def test_none_mode_is_contract_violation(self):
        _, _, ctx, params = make_problem(0)
        with pytest.raises(ContractViolation):
            cross_attention(project_qk(ctx, params), "none")

    def test_projection_width_mismatch(self):
        _, _, ctx, _ = make_problem(0, t=3)
        params = GateParams(GateConfig(context_dim=5, attn_dim=2)).to(torch.float64)
        with pytest.raises(DimensionError):
            project_qk(ctx, params)

    def test_qk_length_mismatch(self):
        with pytest.raises(DimensionError):
            QKMaps(q=torch.zeros(2, 1, 1), k=torch.zeros(3, 1, 1))


class TestContextCorrelation:
    """Test S from the net halves"""

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, seed):
        _, _, ctx, _ = make_problem(seed, t=5)
        torch.testing.assert_close(context_correlation(ctx), oracles.context_correlation(ctx.net1, ctx.net2),
                                   rtol=TOLERANCES.oracle_rtol_single, atol=1e-12)


class TestAssemble:
    """Test structural identities of V"""

    @pytest.mark.parametrize("seed", range(10))
    def test_lambda_zero_gives_gated_volume(self, seed):
        g1, g2, ctx, params = make_problem(seed, lam=0.0)
        c = build_all_pairs(g1, g2)
        m = gate(c, cross_attention(project_qk(ctx, params), "sigmoid"))
        assert torch.equal(assemble(c, ctx, params), m)

    @pytest.mark.parametrize("seed", range(10))
    def test_no_gate_no_lift_is_raw_volume(self, seed):
        g1, g2, ctx, params = make_problem(seed, gate_mode="none", lift=False)
        c = build_all_pairs(g1, g2)
        assert torch.equal(assemble(c, ctx, params), c)

    @pytest.mark.parametrize("seed", range(10))
    def test_sigmoid_gate_shrinks(self, seed):
        g1, g2, ctx, params = make_problem(seed)
        c = build_all_pairs(g1, g2)
        m = gate(c, cross_attention(project_qk(ctx, params), "sigmoid"))
        assert bool((m.abs() <= c.abs()).all())

    def test_lift_adds_scaled_context_correlation(self):
        g1, g2, ctx, params = make_problem(1, gate_mode="none", lam=0.25)
        c = build_all_pairs(g1, g2)
        torch.testing.assert_close(assemble(c, ctx, params), c + 0.25 * context_correlation(ctx))

    def test_gate_shape_mismatch(self):
        with pytest.raises(DimensionError):
            gate(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


class TestFusedVolume:
    """Test the fused forward against the compositional reference"""

    @pytest.mark.parametrize("gate_mode", ["sigmoid", "softmax", "none"])
    @pytest.mark.parametrize("lift", [True, False])
    def test_forward_matches_assemble(self, gate_mode, lift):
        g1, g2, ctx, params = make_problem(2, gate_mode=gate_mode, lift=lift)
        fused = context_guided_volume(g1, g2, ctx, params)
        reference = assemble(build_all_pairs(g1, g2), ctx, params)
        assert torch.equal(fused.detach(), reference.detach())

    def test_grid_mismatch(self):
        g1, g2, ctx, params = make_problem(0)
        with pytest.raises(DimensionError):
            context_guided_volume(g1[:, :2], g2, ctx, params)

    def test_compute_once_counts(self):
        g1, g2, ctx, params = make_problem(0)
        KERNEL_COUNTER.reset()
        context_guided_volume(g1, g2, ctx, params)
        counts = KERNEL_COUNTER.snapshot()
        assert counts["assemble"] == 1
        assert counts["project_qk"] == 1
        assert counts["cross_attention"] == 1
        assert counts["context_correlation"] == 1


class TestBackwardAssemble:
    """Test the hand-derived backward against autograd on the reference path"""

    @pytest.mark.parametrize("gate_mode", ["sigmoid", "softmax", "none"])
    @pytest.mark.parametrize("lift", [True, False])
    def test_matches_autograd(self, gate_mode, lift):
        g1, g2, ctx, params = make_problem(3, gate_mode=gate_mode, lift=lift)
        leaves = [x.clone().requires_grad_(True) for x in (g1, g2, ctx.net1, ctx.net2)]
        a1, a2, n1, n2 = leaves
        bundle = ContextBundle(net1=n1, inp1=ctx.inp1, net2=n2, inp2=ctx.inp2)
        weight = torch.randn(a1.shape[1], a1.shape[2], a2.shape[1], a2.shape[2],
                             generator=torch.Generator().manual_seed(7), dtype=torch.float64)

        params.zero_grad()
        (assemble(build_all_pairs(a1, a2), bundle, params) * weight).sum().backward()
        expected = {"g1": a1.grad, "g2": a2.grad, "net1": n1.grad, "net2": n2.grad,
                    "wq": params.wq.grad, "wk": params.wk.grad, "lam": params.lam.grad}

        _, state = forward_assemble(g1, g2, ctx.net1, ctx.net2, params.wq.detach(), params.wk.detach(),
                                    params.lam.detach(), gate_mode, lift)
        grads = backward_assemble(weight, state)
        for name, value in expected.items():
            got = getattr(grads, name)
            if value is None:
                assert bool((got == 0).all()), name
            else:
                torch.testing.assert_close(got, value, rtol=1e-10, atol=1e-12, msg=name)

    def test_lambda_gradient_is_sum_of_s(self):
        """Under loss = sum V the lambda gradient is exactly sum S"""
        g1, g2, ctx, params = make_problem(4)
        _, state = forward_assemble(g1, g2, ctx.net1, ctx.net2, params.wq.detach(), params.wk.detach(),
                                    params.lam.detach(), "sigmoid", True)
        grads = backward_assemble(torch.ones_like(state.c), state)
        assert float(grads.lam) == pytest.approx(float(context_correlation(ctx).sum()), rel=1e-12)

    def test_missing_state(self):
        with pytest.raises(ContractViolation):
            backward_assemble(torch.zeros(1, 1, 1, 1), None)

    def test_autograd_function_gradients(self):
        g1, g2, ctx, params = make_problem(5)
        g1 = g1.clone().requires_grad_(True)
        context_guided_volume(g1, g2, ctx, params).sum().backward()
        assert g1.grad is not None
        assert params.lam.grad is not None
        assert params.wq.grad.shape == params.wq.shape


class TestDisambiguation:
    """A duplicated patch is ambiguous in C but resolved by context gating and lifting"""

    SIZE = 8
    PATCH = [(2, 4), (3, 4), (2, 5), (3, 5)]   # reference cells (i, j)
    SHIFT = (1, 1)
    DISTRACTOR_ROW = 0

    def build(self):
        n, t = 8, 2
        size = self.SIZE
        generator = torch.Generator().manual_seed(11)
        # integer-valued background in channels 4..7, orthogonal to the patch codes in 0..3
        g1 = torch.zeros(n, size, size, dtype=torch.float64)
        g2 = torch.zeros(n, size, size, dtype=torch.float64)
        g1[4:] = torch.randint(-1, 2, (4, size, size), generator=generator).to(torch.float64)
        g2[4:] = torch.randint(-1, 2, (4, size, size), generator=generator).to(torch.float64)
        net1 = torch.zeros(t, size, size, dtype=torch.float64)
        net2 = torch.zeros(t, size, size, dtype=torch.float64)

        truth = {}
        for code, (i, j) in enumerate(self.PATCH):
            g1[:, j, i] = 0.0
            g1[code, j, i] = 2.0
            net1[0, j, i] = 3.0
            k, l = i + self.SHIFT[0], j + self.SHIFT[1]
            g2[:, l, k] = 0.0
            g2[code, l, k] = 2.0
            net2[0, l, k] = 3.0
            # identical matching feature, different context region, earlier in row-major order
            dk, dl = k, self.DISTRACTOR_ROW + (l - 5)
            g2[:, dl, dk] = 0.0
            g2[code, dl, dk] = 2.0
            net2[1, dl, dk] = 3.0
            truth[(i, j)] = (k, l)

        ctx = ContextBundle(net1=net1, inp1=torch.zeros_like(net1), net2=net2, inp2=torch.zeros_like(net2))
        params = GateParams(GateConfig(context_dim=t, attn_dim=t)).to(torch.float64)
        with torch.no_grad():
            params.wq.copy_(torch.eye(t))
            params.wk.copy_(torch.eye(t))
            params.lam.fill_(0.1)
        return g1, g2, ctx, params, truth

    def test_context_volume_recovers_every_match(self):
        g1, g2, ctx, params, truth = self.build()
        with torch.no_grad():
            v = context_guided_volume(g1, g2, ctx, params)
        hits = sum(argmax_plane(v, i, j) == match for (i, j), match in truth.items())
        assert hits == len(truth)

    def test_raw_volume_is_ambiguous(self):
        g1, g2, _, _, truth = self.build()
        c = build_all_pairs(g1, g2)
        misses = sum(argmax_plane(c, i, j) != match for (i, j), match in truth.items())
        assert misses / len(truth) >= 0.3

    def test_raw_volume_ties_exactly(self):
        g1, g2, _, _, truth = self.build()
        c = build_all_pairs(g1, g2)
        for (i, j), (k, l) in truth.items():
            assert float(c[j, i, l, k]) == float(c[j, i, self.DISTRACTOR_ROW + (l - 5), k])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
