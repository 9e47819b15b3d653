"""Bidirectional cross-attention fusion and the classification/volume/energy heads."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from portionnet.encoders import mlp
from portionnet.errors import ConfigError

# softplus(x) == 1 at this pre-activation, so a fresh volume head predicts the scale
SOFTPLUS_ONE = math.log(math.e - 1.0)


class CrossAttentionBlock(nn.Module):
    """``LayerNorm(query + MHA(query, context, context))`` over single-token modalities."""

    def __init__(self, dim: int = 256, heads: int = 8):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)

    def forward(self, query: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        q = query.unsqueeze(1)
        kv = context.unsqueeze(1)
        out, weights = self.attn(q, kv, kv, need_weights=return_weights, average_attn_weights=False)
        fused = self.norm(query + out.squeeze(1))
        return (fused, weights) if return_weights else fused


class CrossModalFusion(nn.Module):
    def __init__(self, dim: int = 256, heads: int = 8, hidden: int = 512):
        super().__init__()
        self.dim = dim
        self.attn_rgb2geo = CrossAttentionBlock(dim, heads)
        self.attn_geo2rgb = CrossAttentionBlock(dim, heads)
        self.mlp = mlp([2 * dim, hidden, dim])

    def forward(self, rgb: torch.Tensor, geo: torch.Tensor) -> torch.Tensor:
        if rgb.shape != geo.shape or rgb.shape[-1] != self.dim:
            raise ConfigError(f"fusion inputs must both be (B, {self.dim}); got {tuple(rgb.shape)} and {tuple(geo.shape)}")
        rgb_att = self.attn_rgb2geo(rgb, geo)
        geo_att = self.attn_geo2rgb(geo, rgb)
        return self.mlp(torch.cat([rgb_att, geo_att], dim=1))


class ClassificationHead(nn.Module):
    def __init__(self, dim: int = 256, n_classes: int = 12, hidden=(512, 256)):
        super().__init__()
        self.net = mlp([dim, *hidden, n_classes])

    def forward(self, fused):
        return self.net(fused)


class VolumeHead(nn.Module):
    """Affine map followed by Softplus. Output is in units of ``scale`` (a buffer, mL)."""

    def __init__(self, dim: int = 256):
        super().__init__()
        self.linear = nn.Linear(dim, 1)
        nn.init.constant_(self.linear.bias, SOFTPLUS_ONE)

    def forward(self, fused):
        out = F.softplus(self.linear(fused))
        # softplus underflows to 0 in float32 below about -104
        return out.clamp_min(torch.finfo(out.dtype).tiny).squeeze(-1)


class EnergyHead(nn.Module):
    """MLP over ``[fused, volume]``; the volume scalar enters as an explicit input."""

    def __init__(self, dim: int = 256, hidden: int = 128):
        super().__init__()
        self.in_dim = dim + 1
        self.net = mlp([self.in_dim, hidden, hidden, 1])
        nn.init.constant_(self.net[-1].bias, 1.0)

    def forward(self, fused, volume):
        return self.net(torch.cat([fused, volume.unsqueeze(-1)], dim=1)).squeeze(-1)
