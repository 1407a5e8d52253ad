import math

import pytest
import torch

from fdcheck import check_gradients, module_tensors
from mrsnet.spectral_pyramid import (
    PsrConfig,
    SpatialSpectralRefine,
    SpectralPyramid,
    fft_decompose,
    reconstruct,
)


class TestFftDecompose:
    def test_unit_impulse_flat_spectrum(self):
        x = torch.zeros(1, 1, 4, 4)
        x[0, 0, 0, 0] = 1.0
        pair = fft_decompose(x)
        assert torch.allclose(pair.magnitude, torch.ones_like(x), atol=1e-6)
        assert torch.allclose(pair.phase, torch.zeros_like(x), atol=1e-6)

    def test_constant_signal_dc_bin_only(self):
        c = -2.5
        x = torch.full((1, 1, 4, 4), c)
        pair = fft_decompose(x)
        expected = torch.zeros(1, 1, 4, 4)
        expected[0, 0, 0, 0] = 16 * abs(c)
        assert torch.allclose(pair.magnitude, expected, atol=1e-5)

    def test_roundtrip_relative_error(self):
        torch.manual_seed(0)
        for shape in [(2, 3, 4, 4), (1, 8, 6, 10), (1, 1, 5, 7)]:
            x = torch.randn(shape)
            back = reconstruct(fft_decompose(x))
            rel = (back - x).norm() / x.norm()
            assert rel < 1e-5

    def test_magnitude_nonnegative(self):
        torch.manual_seed(1)
        pair = fft_decompose(torch.randn(2, 4, 8, 8))
        assert (pair.magnitude >= 0).all()
        assert pair.phase.min() >= -math.pi and pair.phase.max() <= math.pi

    def test_nonfinite_input_rejected(self):
        x = torch.zeros(1, 1, 4, 4)
        x[0, 0, 1, 1] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            fft_decompose(x)


class TestSpatialSpectralRefine:
    def test_shape_preserved(self):
        torch.manual_seed(0)
        refine = SpatialSpectralRefine(96)
        x = torch.randn(2, 96, 8, 8)
        assert refine(x).shape == x.shape

    def test_channel_mismatch_rejected(self):
        refine = SpatialSpectralRefine(8)
        with pytest.raises(ValueError, match="channels"):
            refine(torch.randn(1, 4, 4, 4))

    def test_zero_conv_gives_uniform_weights(self):
        dim = 8
        refine = SpatialSpectralRefine(dim)
        with torch.no_grad():
            refine.weight_conv.weight.zero_()
            refine.weight_conv.bias.zero_()
        x = torch.randn(2, dim, 4, 4)
        weights = refine.spectral_weights(x)
        assert torch.allclose(weights, torch.full_like(weights, 1.0 / dim), atol=1e-7)
        assert torch.allclose(weights * x, x / dim, atol=1e-7)

    def test_weights_sum_to_one_over_channels(self):
        torch.manual_seed(3)
        refine = SpatialSpectralRefine(6)
        weights = refine.spectral_weights(torch.randn(2, 6, 5, 5))
        sums = weights.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        refine = SpatialSpectralRefine(4).double()
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        check_gradients(lambda: refine(x), module_tensors(refine, {"input": x}))


class TestSpectralPyramid:
    def test_shape_bookkeeping(self):
        torch.manual_seed(0)
        pyramid = SpectralPyramid(16, (1, 2, 4))
        x = torch.randn(1, 16, 8, 8)
        assert pyramid(x).shape == (1, 16, 8, 8)

    def test_single_factor_reduces_to_refine_plus_projection(self):
        torch.manual_seed(1)
        pyramid = SpectralPyramid(8, (1,))
        x = torch.randn(2, 8, 4, 4)
        expected = pyramid.project(pyramid.levels[0](x))
        assert torch.allclose(pyramid(x), expected)

    def test_indivisible_size_names_padding(self):
        pyramid = SpectralPyramid(4, (1, 4))
        with pytest.raises(ValueError, match="pad to 8x8"):
            pyramid(torch.randn(1, 4, 6, 6))

    def test_pool_upsample_preserves_constant(self):
        # the downsample/upsample pair used by the pyramid branches
        x = torch.full((1, 3, 8, 8), 2.75)
        for f in (2, 4):
            down = torch.nn.functional.avg_pool2d(x, f)
            up = torch.nn.functional.interpolate(
                down, size=(8, 8), mode="bilinear", align_corners=False
            )
            assert torch.allclose(up, x, atol=1e-6)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        pyramid = SpectralPyramid(2, (1, 2)).double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        check_gradients(lambda: pyramid(x), module_tensors(pyramid, {"input": x}))


class TestPsrConfig:
    def test_factors_must_start_at_one(self):
        with pytest.raises(ValueError):
            PsrConfig(dim=8, pyramid_factors=(2, 4))

    def test_factors_must_increase(self):
        with pytest.raises(ValueError):
            PsrConfig(dim=8, pyramid_factors=(1, 4, 2))

    def test_only_channel_axis_supported(self):
        with pytest.raises(ValueError):
            PsrConfig(dim=8, weight_axis="spatial")
