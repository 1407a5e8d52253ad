"""Hierarchical cross-scale feature integration.

All encoder stages are rearranged to the coarsest spatial resolution by
space-to-depth packing, concatenated on channels, passed through local
(depthwise conv), global (spatial self-attention), and frequency-domain
(attention over FFT bins) branches, fused, then split back and restored to
their original scales.  The packing is a lossless permutation, so the
channel ledger recovers every stage shape exactly.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def space_to_depth(x: torch.Tensor, factor: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C*f*f, H/f, W/f); exact permutation of elements."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by factor {factor}")
    return F.pixel_unshuffle(x, factor)


def depth_to_space(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Inverse of space_to_depth."""
    if factor == 1:
        return x
    if x.shape[1] % (factor * factor):
        raise ValueError(f"channels {x.shape[1]} not divisible by factor^2 {factor * factor}")
    return F.pixel_shuffle(x, factor)


@dataclass
class StageLedgerEntry:
    stage: int
    original_channels: int
    factor: int

    @property
    def packed_channels(self):
        return self.original_channels * self.factor * self.factor


class LocalConvBranch(nn.Module):
    """Depthwise 3x3 + pointwise 1x1 + batch norm + ReLU.

    Training-mode batch norm with batch size 1 is permitted but uses the
    spatial positions alone for its statistics.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.norm = nn.BatchNorm2d(channels, momentum=0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.norm(self.pointwise(self.depthwise(x))))


class SpatialSelfAttention(nn.Module):
    """Multi-head self-attention over the H*W spatial positions.

    ``attention_width`` sets the internal query/key/value width (None keeps
    the channel count); the output is always projected back to ``channels``.
    """

    def __init__(self, channels: int, heads: int = 4, attention_width=None):
        super().__init__()
        width = attention_width or channels
        if width % heads:
            raise ValueError(f"attention width {width} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.width = width
        self.query_proj = nn.Conv1d(channels, width, 1)
        self.key_proj = nn.Conv1d(channels, width, 1)
        self.value_proj = nn.Conv1d(channels, width, 1)
        self.out_proj = nn.Conv1d(width, channels, 1)

    def _attend(self, tokens):
        b, _, n = tokens.shape
        head_dim = self.width // self.heads
        q = self.query_proj(tokens).reshape(b, self.heads, head_dim, n)
        k = self.key_proj(tokens).reshape(b, self.heads, head_dim, n)
        v = self.value_proj(tokens).reshape(b, self.heads, head_dim, n)
        logits = torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(head_dim)
        attention = torch.softmax(logits, dim=-1)
        out = torch.einsum("bhij,bhdj->bhdi", attention, v).reshape(b, self.width, n)
        return self.out_proj(out), attention

    def forward(self, x: torch.Tensor, return_attention=False):
        b, c, h, w = x.shape
        out, attention = self._attend(x.flatten(2))
        out = out.reshape(b, c, h, w)
        if return_attention:
            return out, attention
        return out


class FrequencySelfAttention(nn.Module):
    """Self-attention over FFT bins, with real/imag parts as token features.

    The spectrum's real and imaginary parts are concatenated into real-valued
    tokens (one per frequency bin), attended, projected back to (real, imag),
    recombined into a complex spectrum, and inverse-transformed; the real
    part is returned.
    """

    def __init__(self, channels: int, heads: int = 4, attention_width=None):
        super().__init__()
        spectral = 2 * channels
        width = attention_width or spectral
        if width % heads:
            raise ValueError(f"attention width {width} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.width = width
        self.query_proj = nn.Conv1d(spectral, width, 1)
        self.key_proj = nn.Conv1d(spectral, width, 1)
        self.value_proj = nn.Conv1d(spectral, width, 1)
        self.out_proj = nn.Conv1d(width, spectral, 1)

    def forward(self, x: torch.Tensor, return_attention=False):
        b, c, h, w = x.shape
        spectrum = torch.fft.fft2(x)
        tokens = torch.cat([spectrum.real, spectrum.imag], dim=1).flatten(2)

        head_dim = self.width // self.heads
        n = h * w
        q = self.query_proj(tokens).reshape(b, self.heads, head_dim, n)
        k = self.key_proj(tokens).reshape(b, self.heads, head_dim, n)
        v = self.value_proj(tokens).reshape(b, self.heads, head_dim, n)
        logits = torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(head_dim)
        attention = torch.softmax(logits, dim=-1)
        attended = torch.einsum("bhij,bhdj->bhdi", attention, v).reshape(b, self.width, n)

        mixed = self.out_proj(attended).reshape(b, 2 * c, h, w)
        real, imag = torch.split(mixed, c, dim=1)
        out = torch.fft.ifft2(torch.complex(real, imag)).real
        if return_attention:
            return out, attention
        return out


class HierarchicalIntegration(nn.Module):
    """Cross-scale fusion of a stage pyramid at the coarsest resolution.

    ``scale_factors`` are the per-stage spatial ratios relative to the
    coarsest stage; the default assumes a dyadic pyramid (deepest last).
    """

    def __init__(self, stage_dims, scale_factors=None, heads: int = 4, attention_width=None):
        super().__init__()
        if len(stage_dims) < 2:
            raise ValueError("hierarchical fusion needs at least 2 stages")
        if scale_factors is None:
            scale_factors = [2 ** (len(stage_dims) - 1 - s) for s in range(len(stage_dims))]
        if len(scale_factors) != len(stage_dims):
            raise ValueError("one scale factor per stage required")
        for f in scale_factors:
            if f < 1 or (f & (f - 1)):
                raise ValueError(f"scale factors must be powers of two, got {scale_factors}")
        self.ledger = [
            StageLedgerEntry(stage=s, original_channels=c, factor=f)
            for s, (c, f) in enumerate(zip(stage_dims, scale_factors))
        ]
        packed = sum(e.packed_channels for e in self.ledger)
        self.packed_channels = packed
        self.local_branch = LocalConvBranch(packed)
        self.spatial_branch = SpatialSelfAttention(packed, heads, attention_width)
        self.frequency_branch = FrequencySelfAttention(packed, heads, attention_width)
        self.fuse = nn.Conv2d(3 * packed, packed, 1)

    def _pack(self, stages):
        if len(stages) != len(self.ledger):
            raise ValueError(f"expected {len(self.ledger)} stages, got {len(stages)}")
        h_min, w_min = stages[-1].shape[-2:]
        packed = []
        for entry, x in zip(self.ledger, stages):
            if x.shape[1] != entry.original_channels:
                raise ValueError(
                    f"stage {entry.stage}: expected {entry.original_channels} channels, "
                    f"got {x.shape[1]}"
                )
            h, w = x.shape[-2:]
            if h != h_min * entry.factor or w != w_min * entry.factor:
                raise ValueError(
                    f"stage {entry.stage}: spatial size {h}x{w} is not the coarsest size "
                    f"{h_min}x{w_min} times its power-of-two factor {entry.factor}"
                )
            packed.append(space_to_depth(x, entry.factor))
        return torch.cat(packed, dim=1)

    def _unpack(self, fused):
        outputs = []
        start = 0
        for entry in self.ledger:
            stop = start + entry.packed_channels
            outputs.append(depth_to_space(fused[:, start:stop], entry.factor))
            start = stop
        return outputs

    def forward(self, stages):
        unified = self._pack(stages)
        branches = torch.cat(
            [
                self.local_branch(unified),
                self.spatial_branch(unified),
                self.frequency_branch(unified),
            ],
            dim=1,
        )
        return self._unpack(self.fuse(branches))
