"""
Unit Tests for the Correlation Engine
=====================================

All-pairs volumes, pyramids and lookups against naive loop oracles.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from cgcv.config import TOLERANCES
from cgcv.corr_engine import (
    KERNEL_COUNTER, CorrPyramid, KernelCounter, argmax_plane, build_all_pairs, build_pyramid,
    lookup, window_offsets,
)
from cgcv.errors import ContractViolation, DimensionError
from cgcv.models import LookupConfig
from tests import oracles


def features(seed: int, n: int, h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(n, h, w, generator=generator, dtype=dtype)


def unit_features(seed: int, n: int, h: int, w: int) -> torch.Tensor:
    """Random features with unit norm at every cell"""
    g = features(seed, n, h, w)
    return g / g.norm(dim=0, keepdim=True)


def patch_descriptors(image: torch.Tensor, radius: int = 1) -> torch.Tensor:
    """
    (C, H, W) image -> (C * (2r+1)^2, H, W) zero-mean unit-norm descriptors
    of the periodic neighbourhood of every pixel
    """
    c, h, w = image.shape
    size = 2 * radius + 1
    padded = F.pad(image[None], (radius, radius, radius, radius), mode="circular")
    columns = F.unfold(padded, size)[0].reshape(c * size * size, h, w)
    columns = columns - columns.mean(dim=0, keepdim=True)
    return columns / columns.norm(dim=0, keepdim=True)


class TestKernelCounter:
    """Test invocation accounting"""

    def test_record_and_reset(self):
        counter = KernelCounter()
        counter.record("a")
        counter.record("a")
        counter.record("b")
        assert counter.snapshot() == {"a": 2, "b": 1}
        assert counter.total() == 3
        counter.reset()
        assert counter.snapshot() == {}

    def test_all_pairs_is_recorded(self):
        KERNEL_COUNTER.reset()
        build_all_pairs(features(0, 2, 2, 2), features(1, 2, 2, 2))
        assert KERNEL_COUNTER.snapshot()["all_pairs"] == 1


class TestBuildAllPairs:
    """Test the all-pairs correlation volume"""

    def test_shape(self):
        v = build_all_pairs(features(0, 4, 3, 5), features(1, 4, 2, 6))
        assert v.shape == (3, 5, 2, 6)

    def test_identical_unit_vectors(self):
        """A one-hot feature correlates with itself at 1/sqrt(n)"""
        g = torch.zeros(4, 1, 2, dtype=torch.float64)
        g[1, 0, 0] = 1.0
        v = build_all_pairs(g, g)
        assert float(v[0, 0, 0, 0]) == pytest.approx(0.5)
        assert float(v[0, 0, 0, 1]) == 0.0

    def test_index_convention(self):
        """v[j, i, l, k] equals the inner product of column i row j with column k row l"""
        g1, g2 = features(2, 5, 3, 4), features(3, 5, 2, 3)
        v = build_all_pairs(g1, g2)
        expected = sum(float(g1[c, 2, 1]) * float(g2[c, 1, 2]) for c in range(5)) / math.sqrt(5)
        assert float(v[2, 1, 1, 2]) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, seed):
        generator = torch.Generator().manual_seed(seed)
        n = int(torch.randint(1, 33, (1,), generator=generator))
        h1, w1, h2, w2 = (int(x) for x in torch.randint(1, 6, (4,), generator=generator))
        g1, g2 = features(seed, n, h1, w1), features(seed + 100, n, h2, w2)
        expected = oracles.all_pairs(g1, g2, 1 / math.sqrt(n))
        torch.testing.assert_close(build_all_pairs(g1, g2), expected, rtol=TOLERANCES.oracle_rtol_single, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError) as exc_info:
            build_all_pairs(torch.zeros(3, 2, 2), torch.zeros(4, 2, 2))
        assert "channel mismatch" in str(exc_info.value)

    def test_custom_scale(self):
        g = features(4, 3, 2, 2)
        torch.testing.assert_close(build_all_pairs(g, g, scale=2.0), 2 * math.sqrt(3) * build_all_pairs(g, g))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_swapping_frames_transposes_volume(self, seed):
        """v12[j, i, l, k] equals v21[l, k, j, i]"""
        g1, g2 = features(seed, 6, 3, 4), features(seed + 50, 6, 5, 2)
        v12 = build_all_pairs(g1, g2)
        v21 = build_all_pairs(g2, g1)
        assert v21.shape == (5, 2, 3, 4)
        torch.testing.assert_close(v12, v21.permute(2, 3, 0, 1), rtol=1e-12, atol=1e-12)

    def test_shifted_copy_peaks_at_shift(self):
        """Target is the reference moved by (dx, dy) = (2, 1) with zero fill"""
        dx, dy = 2, 1
        g1 = unit_features(5, 8, 6, 7)
        g2 = torch.zeros_like(g1)
        g2[:, dy:, dx:] = g1[:, :-dy, :-dx]
        v = build_all_pairs(g1, g2)
        for j in range(6 - dy):
            for i in range(7 - dx):
                assert argmax_plane(v, i, j) == (i + dx, j + dy)


class TestBuildPyramid:
    """Test the correlation pyramid"""

    def test_level_shapes(self):
        v = build_all_pairs(features(0, 4, 3, 3), features(1, 4, 8, 8))
        pyramid = build_pyramid(v, 4)
        assert [tuple(level.shape) for level in pyramid.levels] == [
            (3, 3, 8, 8), (3, 3, 4, 4), (3, 3, 2, 2), (3, 3, 1, 1)]
        assert pyramid.reference_dims == (3, 3)

    def test_levels_preserve_plane_mean(self):
        v = build_all_pairs(features(2, 6, 2, 2), features(3, 6, 4, 8))
        pyramid = build_pyramid(v, 3)
        for level in pyramid.levels[1:]:
            torch.testing.assert_close(level.mean(dim=(2, 3)), v.mean(dim=(2, 3)),
                                       atol=TOLERANCES.pyramid_mean_atol, rtol=0)

    def test_indivisible_target(self):
        v = torch.zeros(1, 1, 6, 6)
        with pytest.raises(DimensionError) as exc_info:
            build_pyramid(v, 3)
        assert "not divisible" in str(exc_info.value)

    def test_inconsistent_levels_rejected(self):
        with pytest.raises(DimensionError):
            CorrPyramid(levels=(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3)))


class TestLookup:
    """Test radius-bounded lookup"""

    def test_window_offsets_order(self):
        ox, oy = window_offsets(1)
        assert ox.tolist() == [-1, 0, 1] * 3
        assert oy.tolist() == [-1, -1, -1, 0, 0, 0, 1, 1, 1]

    def test_output_shape(self):
        v = build_all_pairs(features(0, 4, 3, 5), features(1, 4, 4, 8))
        cfg = LookupConfig(radius=2, num_levels=3)
        out = lookup(build_pyramid(v, 3), torch.zeros(2, 3, 5, dtype=torch.float64), cfg)
        assert out.shape == (cfg.length, 3, 5)
        assert cfg.length == 75

    def test_zero_flow_center_is_diagonal(self):
        """With zero flow and radius 0 the single level-0 sample is v[j, i, j, i]"""
        v = build_all_pairs(features(0, 3, 4, 4), features(1, 3, 4, 4))
        out = lookup(build_pyramid(v, 1), torch.zeros(2, 4, 4, dtype=torch.float64), LookupConfig(radius=0, num_levels=1))
        for j in range(4):
            for i in range(4):
                assert float(out[0, j, i]) == float(v[j, i, j, i])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, seed):
        g1, g2 = features(seed, 4, 3, 3), features(seed + 50, 4, 4, 4)
        v = build_all_pairs(g1, g2)
        pyramid = build_pyramid(v, 2)
        generator = torch.Generator().manual_seed(seed)
        flow = (torch.rand(2, 3, 3, generator=generator, dtype=torch.float64) * 2 - 1) * 3
        expected = oracles.lookup(list(pyramid.levels), flow, radius=1)
        out = lookup(pyramid, flow, LookupConfig(radius=1, num_levels=2))
        torch.testing.assert_close(out, expected, rtol=TOLERANCES.oracle_rtol_single, atol=1e-12)

    def test_flow_shape_mismatch(self):
        pyramid = build_pyramid(torch.zeros(2, 2, 4, 4), 2)
        with pytest.raises(DimensionError):
            lookup(pyramid, torch.zeros(2, 3, 3), LookupConfig(radius=1, num_levels=2))

    def test_level_count_mismatch(self):
        pyramid = build_pyramid(torch.zeros(2, 2, 4, 4), 2)
        with pytest.raises(DimensionError):
            lookup(pyramid, torch.zeros(2, 2, 2), LookupConfig(radius=1, num_levels=3))


class TestArgmaxPlane:
    """Test plane argmax"""

    def test_finds_peak(self):
        v = torch.zeros(2, 3, 4, 5)
        v[1, 2, 3, 4] = 1.0
        assert argmax_plane(v, i=2, j=1) == (4, 3)

    def test_ties_go_to_first(self):
        v = torch.zeros(1, 1, 2, 2)
        assert argmax_plane(v, 0, 0) == (0, 0)

    def test_out_of_range_query(self):
        with pytest.raises(ContractViolation):
            argmax_plane(torch.zeros(2, 2, 2, 2), i=2, j=0)

    @pytest.mark.parametrize("seed,dx,dy", [(0, 3, -2), (1, -5, 4), (2, 7, 0), (3, 0, -6)])
    def test_integer_translation_recovered(self, seed, dx, dy):
        """The per-cell argmax recovers a wrapped integer translation"""
        h, w = 24, 32
        generator = torch.Generator().manual_seed(seed)
        reference = torch.rand(3, h, w, generator=generator, dtype=torch.float64)
        target = torch.roll(reference, shifts=(dy, dx), dims=(1, 2))
        v = build_all_pairs(patch_descriptors(reference), patch_descriptors(target))

        hits = sum(argmax_plane(v, i, j) == ((i + dx) % w, (j + dy) % h)
                   for j in range(h) for i in range(w))
        assert hits / (h * w) >= 0.99


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
