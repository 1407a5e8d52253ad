"""Intra-scale feature interaction: pyramid, relation, and alignment branches
fused by independent sigmoid gates.

A disabled branch (ablation flag off) contributes the unmodified stage
feature instead, so its parameters never enter the forward graph and stay
gradient-free while the fused wiring remains comparable across runs.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .cross_modal_align import CrossModalAlign
from .spatial_relations import SpatialRelationModel
from .spectral_pyramid import SpectralPyramid


@dataclass
class IfimStageOutput:
    refined: torch.Tensor   # (B, dim, H, W)
    gates: torch.Tensor     # (B, 3, dim, H, W), each map in (0, 1)


class AdaptiveFusion(nn.Module):
    """Gate three same-shape branch outputs and fuse them additively.

    concat -> 1x1 conv -> sigmoid -> split into three weight maps; the
    weighted sum goes through a final 1x1 conv.  Gates are independent
    sigmoids, not a softmax partition.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.gate_conv = nn.Conv2d(3 * dim, 3 * dim, 1)
        self.project = nn.Conv2d(dim, dim, 1)

    def forward(self, f_pyramid, f_relation, f_aligned) -> IfimStageOutput:
        if not (f_pyramid.shape == f_relation.shape == f_aligned.shape):
            raise ValueError(
                "branch shapes differ: "
                f"{tuple(f_pyramid.shape)}, {tuple(f_relation.shape)}, {tuple(f_aligned.shape)}"
            )
        gates = torch.sigmoid(self.gate_conv(torch.cat([f_pyramid, f_relation, f_aligned], dim=1)))
        w1, w2, w3 = torch.split(gates, self.dim, dim=1)
        mixed = w1 * f_pyramid + w2 * f_relation + w3 * f_aligned
        return IfimStageOutput(
            refined=self.project(mixed),
            gates=torch.stack([w1, w2, w3], dim=1),
        )


class IntraScaleInteraction(nn.Module):
    """One encoder stage's interaction block (the per-stage refinement unit)."""

    def __init__(
        self,
        dim: int,
        lang_dim: int,
        heads: int = 1,
        pyramid_factors=(1, 2, 4),
        use_psr: bool = True,
        use_csr: bool = True,
    ):
        super().__init__()
        self.use_psr = use_psr
        self.use_csr = use_csr
        # submodules always exist so checkpoints keep one structure across ablations
        self.pyramid = SpectralPyramid(dim, pyramid_factors)
        self.relations = SpatialRelationModel(dim)
        self.align = CrossModalAlign(dim, lang_dim, heads)
        self.fuse = AdaptiveFusion(dim)

    def forward(self, x, lang, mask) -> IfimStageOutput:
        f_pyramid = self.pyramid(x) if self.use_psr else x
        f_relation = self.relations(x) if self.use_csr else x
        f_aligned = self.align(x, lang, mask)
        return self.fuse(f_pyramid, f_relation, f_aligned)
