"""Pyramidal spatial-spectral refinement.

Each pyramid level refines a feature map jointly in the spatial domain
(a convolution) and the frequency domain (channel-softmax weights derived
from the FFT magnitude/phase), then the per-level outputs are upsampled
back to the input resolution, concatenated, and projected to the input
width.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SpectralPair:
    """FFT magnitude and phase of a feature map, same (B, C, H, W) layout."""

    magnitude: torch.Tensor
    phase: torch.Tensor


@dataclass
class PsrConfig:
    dim: int
    pyramid_factors: tuple = (1, 2, 4)
    weight_axis: str = "channel"

    def __post_init__(self):
        factors = tuple(self.pyramid_factors)
        if not factors or factors[0] != 1:
            raise ValueError(f"pyramid factors must start at 1, got {factors}")
        if any(b <= a for a, b in zip(factors, factors[1:])):
            raise ValueError(f"pyramid factors must be strictly increasing, got {factors}")
        if self.weight_axis != "channel":
            raise ValueError(f"unsupported weight axis {self.weight_axis!r}")
        self.pyramid_factors = factors


def fft_decompose(x2d):
    """2D FFT of a (B, C, H, W) map as (magnitude, phase).

    Unnormalized forward transform; reconstruct() applies the 1/(HW) inverse.
    """
    if not torch.isfinite(x2d).all():
        raise ValueError("non-finite values in input to fft_decompose")
    spectrum = torch.fft.fft2(x2d)
    return SpectralPair(magnitude=spectrum.abs(), phase=spectrum.angle())


def reconstruct(pair):
    """Inverse of fft_decompose (real part of the inverse FFT)."""
    spectrum = torch.polar(pair.magnitude, pair.phase)
    return torch.fft.ifft2(spectrum).real


class SpatialSpectralRefine(nn.Module):
    """Single-scale refinement: spatial conv branch + spectral reweighting branch.

    The spectral branch softmaxes conv([magnitude, phase]) over channels and
    multiplies the input elementwise; both branches are fused by a conv.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.spatial_conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.weight_conv = nn.Conv2d(2 * dim, dim, 3, padding=1)
        self.fuse_conv = nn.Conv2d(2 * dim, dim, 3, padding=1)

    def spectral_weights(self, x):
        pair = fft_decompose(x)
        logits = self.weight_conv(torch.cat([pair.magnitude, pair.phase], dim=1))
        return torch.softmax(logits, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {x.shape[1]}")
        x_spatial = self.spatial_conv(x)
        x_freq = self.spectral_weights(x) * x
        return self.fuse_conv(torch.cat([x_spatial, x_freq], dim=1))


class SpectralPyramid(nn.Module):
    """Multi-scale spatial-spectral refinement over a downsampling pyramid.

    Average-pools by each factor, refines per level (unshared parameters),
    bilinearly upsamples back, concatenates, and projects back to ``dim``.
    """

    def __init__(self, dim: int, pyramid_factors=(1, 2, 4)):
        super().__init__()
        self.config = PsrConfig(dim=dim, pyramid_factors=tuple(pyramid_factors))
        self.levels = nn.ModuleList(
            SpatialSpectralRefine(dim) for _ in self.config.pyramid_factors
        )
        self.project = nn.Conv2d(dim * len(self.levels), dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        fmax = max(self.config.pyramid_factors)
        if h % fmax or w % fmax:
            pad_h = (fmax - h % fmax) % fmax
            pad_w = (fmax - w % fmax) % fmax
            raise ValueError(
                f"spatial size {h}x{w} must be divisible by {fmax}; "
                f"pad to {h + pad_h}x{w + pad_w}"
            )
        outputs = []
        for factor, refine in zip(self.config.pyramid_factors, self.levels):
            if factor == 1:
                outputs.append(refine(x))
            else:
                down = F.avg_pool2d(x, factor)
                up = F.interpolate(
                    refine(down), size=(h, w), mode="bilinear", align_corners=False
                )
                outputs.append(up)
        return self.project(torch.cat(outputs, dim=1))
