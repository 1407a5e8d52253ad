"""Full network assembly: encoders, per-stage interaction, cross-scale fusion,
and a top-down decoder ending in a single-channel logit map.

The vision/text encoders are pluggable interfaces; the toy implementations
here (strided convolutions, hashed token embeddings) let the whole pipeline
run deterministically with no pretrained weights.
"""

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .hfim import HierarchicalIntegration
from .ifim import IntraScaleInteraction

DEFAULT_STAGE_DIMS = (96, 192, 384, 768)
DEFAULT_STAGE_STRIDES = (4, 8, 16, 32)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[一-鿿]")


@dataclass
class SegmentationOutput:
    logits: torch.Tensor  # (B, 1, H, W)

    @property
    def probability(self):
        return torch.sigmoid(self.logits)

    def predicted_mask(self, threshold=0.5):
        return self.probability > threshold


class ToyVisionEncoder(nn.Module):
    """Strided convolutional stand-in for a pretrained backbone.

    Stage s emits (B, stage_dims[s], H/stride_s, W/stride_s); stages can be
    run one at a time so refined features can feed the next stage.
    """

    def __init__(self, stage_dims=DEFAULT_STAGE_DIMS, stage_strides=DEFAULT_STAGE_STRIDES):
        super().__init__()
        if len(stage_dims) != len(stage_strides):
            raise ValueError("stage_dims and stage_strides must align")
        self.stage_dims = tuple(stage_dims)
        self.stage_strides = tuple(stage_strides)
        blocks = []
        in_ch = 3
        prev_stride = 1
        for dim, stride in zip(stage_dims, stage_strides):
            if stride % prev_stride:
                raise ValueError(f"strides must be nested multiples, got {stage_strides}")
            step = stride // prev_stride
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, dim, kernel_size=step, stride=step),
                    nn.GELU(),
                    nn.Conv2d(dim, dim, 3, padding=1),
                )
            )
            in_ch = dim
            prev_stride = stride
        self.blocks = nn.ModuleList(blocks)

    def forward_stage(self, index, x):
        return self.blocks[index](x)

    def forward(self, image):
        stages = []
        x = image
        for index in range(len(self.blocks)):
            x = self.forward_stage(index, x)
            stages.append(x)
        return stages


class HashTextEncoder:
    """Deterministic text embedder: each token hashes to a fixed random vector.

    Output is (B, embed_dim, max_tokens) plus a boolean validity mask; the
    same text always maps to the same embedding across runs and machines.
    """

    def __init__(self, embed_dim=64, max_tokens=20):
        self.embed_dim = embed_dim
        self.max_tokens = max_tokens
        self._cache = {}

    def _token_vector(self, token):
        if token not in self._cache:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "big")
            rng = np.random.default_rng(seed)
            self._cache[token] = rng.standard_normal(self.embed_dim).astype(np.float32)
        return self._cache[token]

    def tokenize(self, text):
        return _TOKEN_RE.findall(text.lower())

    def __call__(self, texts):
        batch = np.zeros((len(texts), self.embed_dim, self.max_tokens), dtype=np.float32)
        mask = np.zeros((len(texts), self.max_tokens), dtype=bool)
        for b, text in enumerate(texts):
            tokens = self.tokenize(text)[: self.max_tokens]
            if not tokens:
                raise ValueError(f"expression {text!r} produced no tokens")
            for t, token in enumerate(tokens):
                batch[b, :, t] = self._token_vector(token)
                mask[b, t] = True
        return torch.from_numpy(batch), torch.from_numpy(mask)


class MRSNet(nn.Module):
    """Segmentation network mapping (image, expression) to a logit map.

    Per-stage interaction blocks refine each encoder stage (the refined map
    feeds both the next stage and the cross-scale fusion), then a top-down
    decoder with skip connections upsamples back to full resolution.

    The cross-scale fusion operates at the packed channel width (sum of
    stage dims times squared scale ratios), so wide stage_dims get expensive
    fast; desk-scale configs should keep stage_dims small and may cap
    hfim_attention_width.
    """

    def __init__(
        self,
        vision_encoder=None,
        text_encoder=None,
        use_psr=True,
        use_csr=True,
        cma_heads=1,
        hfim_heads=4,
        hfim_attention_width=None,
        pyramid_factors=(1, 2, 4),
        threshold=0.5,
    ):
        super().__init__()
        self.vision_encoder = vision_encoder if vision_encoder is not None else ToyVisionEncoder()
        self.text_encoder = text_encoder if text_encoder is not None else HashTextEncoder()
        self.threshold = threshold
        self.pyramid_factors = tuple(pyramid_factors)

        dims = self.vision_encoder.stage_dims
        strides = self.vision_encoder.stage_strides
        lang_dim = self.text_encoder.embed_dim
        self.stages = nn.ModuleList(
            IntraScaleInteraction(
                dim,
                lang_dim,
                heads=cma_heads,
                pyramid_factors=self.pyramid_factors,
                use_psr=use_psr,
                use_csr=use_csr,
            )
            for dim in dims
        )
        scale_factors = [strides[-1] // s for s in strides]
        self.cross_scale = HierarchicalIntegration(
            dims, scale_factors, heads=hfim_heads, attention_width=hfim_attention_width
        )
        # top-down decoder: 2x upsample + 3x3 conv halving channels per level
        self.decoder = nn.ModuleList(
            nn.Conv2d(dims[s + 1] + dims[s], dims[s], 3, padding=1)
            for s in range(len(dims) - 1)
        )
        self.head = nn.Conv2d(dims[0], 1, 1)
        self.final_stride = strides[0]

    def required_multiple(self):
        # the coarsest stage must still be divisible by the largest pyramid factor
        return self.vision_encoder.stage_strides[-1] * max(self.pyramid_factors)

    def forward(self, images, expressions) -> SegmentationOutput:
        b, c, h, w = images.shape
        multiple = self.required_multiple()
        if h % multiple or w % multiple:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {multiple} "
                f"(stride {self.vision_encoder.stage_strides[-1]} x "
                f"pyramid factor {max(self.pyramid_factors)})"
            )
        if len(expressions) != b:
            raise ValueError(f"got {b} images but {len(expressions)} expressions")
        lang, mask = self.text_encoder(expressions)
        lang = lang.to(device=images.device, dtype=images.dtype)
        mask = mask.to(device=images.device)

        refined = []
        x = images
        for index, stage in enumerate(self.stages):
            x = self.vision_encoder.forward_stage(index, x)
            x = stage(x, lang, mask).refined
            refined.append(x)

        fused = self.cross_scale(refined)
        y = fused[-1]
        for s in range(len(fused) - 2, -1, -1):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            y = F.gelu(self.decoder[s](torch.cat([y, fused[s]], dim=1)))
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        return SegmentationOutput(logits=self.head(y))


def bce_loss(logits, target, dice_weight=0.0):
    """Mean pixelwise binary cross-entropy on clamped probabilities.

    Valid for all-zero targets (non-object samples contribute background
    loss only); optionally adds a smoothed dice term.
    """
    target = target.to(logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
    p = torch.sigmoid(logits).clamp(1e-7, 1.0 - 1e-7)
    loss = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
    if dice_weight > 0.0:
        smooth = 1.0
        inter = (p * target).sum()
        dice = 1.0 - (2.0 * inter + smooth) / (p.sum() + target.sum() + smooth)
        loss = loss + dice_weight * dice
    return loss
