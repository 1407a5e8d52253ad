"""Language-gated cross-attention from visual queries to linguistic keys/values.

The expression tokens are first reweighted by a sigmoid gate, then attended
to by the projected visual features; a per-pixel sigmoid gate blends the
visual and attended-language features as a convex combination.

Padded token positions are zeroed after gating and masked to -inf in the
attention logits, so the output is invariant to how much padding the
expression carries.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _valid_mask(mask, like):
    """Normalize a validity mask to float (B, N_l) with 1 = real token."""
    mask = mask.to(device=like.device)
    return (mask > 0).to(like.dtype) if not mask.dtype.is_floating_point else mask.to(like.dtype)


class LanguageGate(nn.Module):
    """Per-token importance gate: sigmoid(Conv1D(L)), broadcast over channels."""

    def __init__(self, lang_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(lang_dim, 1, 1)

    def forward(self, lang, mask):
        valid = _valid_mask(mask, lang)
        if (valid.sum(dim=-1) == 0).any():
            raise ValueError("expression must have at least one valid token")
        gate = torch.sigmoid(self.conv(lang))
        gated = lang * gate * valid.unsqueeze(1)
        return gated, gate


class CrossAttention(nn.Module):
    """Scaled dot-product attention: visual queries over language keys/values."""

    def __init__(self, dim: int, lang_dim: int, heads: int = 1):
        super().__init__()
        if dim <= 0:
            raise ValueError("attention width must be positive")
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.query_proj = nn.Conv1d(dim, dim, 1)
        self.key_proj = nn.Conv1d(lang_dim, dim, 1)
        self.value_proj = nn.Conv1d(lang_dim, dim, 1)
        self.out_proj = nn.Conv1d(dim, dim, 1)

    def forward(self, v_proj, gated_lang, mask, return_attention=False):
        b, _, n_v = v_proj.shape
        n_l = gated_lang.shape[-1]
        head_dim = self.dim // self.heads

        q = self.query_proj(v_proj).reshape(b, self.heads, head_dim, n_v)
        k = self.key_proj(gated_lang).reshape(b, self.heads, head_dim, n_l)
        v = self.value_proj(gated_lang).reshape(b, self.heads, head_dim, n_l)

        logits = torch.einsum("bhdv,bhdl->bhvl", q, k) / math.sqrt(head_dim)
        valid = _valid_mask(mask, v_proj)
        logits = logits.masked_fill(valid[:, None, None, :] == 0, float("-inf"))
        attention = torch.softmax(logits, dim=-1)

        attended = torch.einsum("bhvl,bhdl->bhdv", attention, v).reshape(b, self.dim, n_v)
        out = self.out_proj(attended)
        if return_attention:
            return out, attention
        return out


class GatedFusion(nn.Module):
    """Per-pixel convex blend of visual and attended-language features."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight_conv = nn.Conv1d(2 * dim, dim, 1)
        self.project = nn.Conv1d(dim, dim, 1)

    def blend(self, v_proj, v_lang):
        gate = torch.sigmoid(self.weight_conv(torch.cat([v_proj, v_lang], dim=1)))
        return gate * v_proj + (1.0 - gate) * v_lang, gate

    def forward(self, v_proj, v_lang):
        blended, _ = self.blend(v_proj, v_lang)
        return self.project(blended)


class CrossModalAlign(nn.Module):
    """Full cross-modal alignment block operating on a (B, dim, H, W) stage map."""

    def __init__(self, dim: int, lang_dim: int, heads: int = 1):
        super().__init__()
        self.visual_proj = nn.Conv1d(dim, dim, 1)
        self.gate = LanguageGate(lang_dim)
        self.attend = CrossAttention(dim, lang_dim, heads)
        self.fuse = GatedFusion(dim)

    def forward(self, x: torch.Tensor, lang: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        v_proj = F.gelu(self.visual_proj(x.flatten(2)))
        gated_lang, _ = self.gate(lang, mask)
        v_lang = self.attend(v_proj, gated_lang, mask)
        return self.fuse(v_proj, v_lang).reshape(b, c, h, w)
