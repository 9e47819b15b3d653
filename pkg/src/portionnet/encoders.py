"""RGB encoder stack and the point-cloud geometry teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from portionnet.errors import ConfigError


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    output_dim: int
    min_resolution: int = 32


def mlp(dims: list[int], final_act: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(d_in, d_out))
        if i < len(dims) - 2 or final_act:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class FeatureStandardizer(nn.Module):
    """Fixed per-channel affine ``(x - mean) / std``; statistics are set once by :meth:`fit`.

    Unfitted it is the identity. The statistics are buffers, so they travel with
    checkpoints and never receive gradients.
    """

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    @torch.no_grad()
    def fit(self, x: torch.Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.mean.shape[0] or x.shape[0] < 2:
            raise ConfigError(f"need (N >= 2, {self.mean.shape[0]}) features to fit, got {tuple(x.shape)}")
        self.mean.copy_(x.mean(0))
        self.std.copy_(x.std(0).clamp_min(self.eps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class FeatureNorm(nn.Module):
    """LayerNorm on the projected feature; ``kind="unit"`` also divides by sqrt(dim).

    The unit variant gives feature vectors of norm about 1, which keeps the
    summed-over-dims distillation MSE on the same scale as the task losses.
    """

    def __init__(self, dim: int, kind: str = "unit"):
        super().__init__()
        if kind not in ("unit", "layer"):
            raise ConfigError(f"unknown feature norm {kind!r}")
        self.kind = kind
        self.norm = nn.LayerNorm(dim)
        self.scale = dim**-0.5 if kind == "unit" else 1.0

    def forward(self, x):
        return self.norm(x) * self.scale


class PatchBackbone(nn.Module):
    """Small ViT-shaped stand-in: patch embedding, token mean, linear head."""

    def __init__(self, output_dim: int = 768, patch: int = 8, width: int = 64):
        super().__init__()
        self.spec = BackboneSpec("patch-standin", output_dim, min_resolution=4 * patch)
        self.embed = nn.Conv2d(3, width, patch, stride=patch)
        self.head = nn.Linear(width, output_dim)

    def forward(self, x):
        tokens = F.gelu(self.embed(x)).flatten(2)
        return self.head(tokens.mean(dim=2))


class ConvBackbone(nn.Module):
    """Small ResNet-shaped stand-in: strided convs, global average pool, linear head."""

    def __init__(self, output_dim: int = 512, widths=(16, 32, 64)):
        super().__init__()
        self.spec = BackboneSpec("conv-standin", output_dim, min_resolution=32)
        chans = [3, *widths]
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, stride=2, padding=1) for i, o in zip(chans[:-1], chans[1:]))
        self.head = nn.Linear(chans[-1], output_dim)

    def forward(self, x):
        for conv in self.convs:
            x = F.gelu(conv(x))
        return self.head(x.mean(dim=(2, 3)))


class _TorchvisionTrunk(nn.Module):
    def __init__(self, model: nn.Module, spec: BackboneSpec):
        super().__init__()
        self.model = model
        self.spec = spec

    def forward(self, x):
        return self.model(x)


def torchvision_backbones(pretrained: bool = False) -> tuple[nn.Module, nn.Module]:
    """ViT-B/16 (768-d) and ResNet-18 (512-d) with classification heads removed.

    ``pretrained=True`` asks torchvision for ImageNet weights, which requires
    network access or a populated torch hub cache.
    """
    from torchvision import models

    vit = models.vit_b_16(weights=models.ViT_B_16_Weights.DEFAULT if pretrained else None)
    vit.heads = nn.Identity()
    resnet = models.resnet18(weights=models.ResNet18_Weights.DEFAULT if pretrained else None)
    resnet.fc = nn.Identity()
    return (
        _TorchvisionTrunk(vit, BackboneSpec("vit_b_16", 768, min_resolution=224)),
        _TorchvisionTrunk(resnet, BackboneSpec("resnet18", 512, min_resolution=32)),
    )


class RGBEncoder(nn.Module):
    """Two backbones, concatenated, projected to ``feature_dim`` by a two-layer MLP."""

    def __init__(self, backbone_a: nn.Module, backbone_b: nn.Module, feature_dim: int = 256, hidden: int = 512,
                 feature_norm: str = "unit"):
        super().__init__()
        self.backbone_a = backbone_a
        self.backbone_b = backbone_b
        self.concat_dim = backbone_a.spec.output_dim + backbone_b.spec.output_dim
        self.min_resolution = max(backbone_a.spec.min_resolution, backbone_b.spec.min_resolution)
        self.norm_in = FeatureStandardizer(self.concat_dim)
        self.proj = nn.Sequential(*mlp([self.concat_dim, hidden, feature_dim]), FeatureNorm(feature_dim, feature_norm))

    def backbone_features(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[0] == 0:
            raise ConfigError(f"expected a nonempty (B, 3, H, W) batch, got {tuple(images.shape)}")
        if min(images.shape[-2:]) < self.min_resolution:
            raise ConfigError(
                f"image resolution {tuple(images.shape[-2:])} below backbone minimum {self.min_resolution}"
            )
        return torch.cat([self.backbone_a(images), self.backbone_b(images)], dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm_in(self.backbone_features(images)))


class BBoxEmbedding(nn.Module):
    def __init__(self, out_dim: int = 64, input_scale: float = 10.0):
        super().__init__()
        self.input_scale = input_scale
        self.linear = nn.Linear(3, out_dim)

    def forward(self, dims: torch.Tensor) -> torch.Tensor:
        if dims.shape[-1] != 3:
            raise ConfigError(f"bbox dims must have 3 components, got {tuple(dims.shape)}")
        if not torch.all(dims > 0):
            raise ConfigError("bbox dims must be positive")
        return F.gelu(self.linear(dims * self.input_scale))


def multiscale_pool(features: torch.Tensor, resolutions=(64, 128, 256, 512), aggregation: str = "mean") -> torch.Tensor:
    """Pool per-point features ``(B, N, D)`` at several sequence resolutions.

    Each channel is sorted along the point axis first (so the result does not
    depend on point order), adaptively max-pooled to ``k`` slots for every
    resolution ``k <= N``, and the ``k`` slots are aggregated globally. Returns
    ``(B, len(used) * D)``.

    With ``aggregation="max"`` every scale collapses to the plain global max;
    ``"mean"`` averages the slot maxima, so each scale summarises a different
    part of the sorted per-channel distribution.
    """
    if features.ndim != 3 or features.shape[1] == 0:
        raise ConfigError(f"expected nonempty (B, N, D) features, got {tuple(features.shape)}")
    n = features.shape[1]
    used = [k for k in resolutions if k <= n]
    if not used:
        raise ConfigError(f"no pooling resolution <= N={n}")
    seq = sort_points(features.transpose(1, 2).contiguous())  # (B, D, N), ascending
    if aggregation == "max":
        top = seq[:, :, -1]
        return torch.cat([top] * len(used), dim=1)
    # On an ascending sequence, adaptive max pooling to k bins keeps the last
    # element of each bin, so the slot mean is a fixed linear functional of seq.
    weights = torch.stack([_slot_mean_weights(n, k) for k in used], dim=1).to(seq)  # (N, K)
    pooled = seq @ weights  # (B, D, K)
    return pooled.transpose(1, 2).reshape(features.shape[0], -1)


def _bin_ends(n: int, k: int) -> torch.Tensor:
    # adaptive pooling bin j spans [floor(j n / k), ceil((j + 1) n / k))
    j = torch.arange(1, k + 1)
    return (j * n + k - 1) // k - 1


def _slot_mean_weights(n: int, k: int) -> torch.Tensor:
    w = torch.zeros(n, dtype=torch.float64)
    w[_bin_ends(n, k)] = 1.0 / k
    return w


def sort_points(x: torch.Tensor) -> torch.Tensor:
    """Differentiable ascending sort along the last axis.

    The permutation comes from numpy (several times faster than ``torch.sort``
    on CPU); values are gathered in torch so gradients route as for a sort.
    """
    if x.device.type != "cpu":
        return torch.sort(x, dim=-1).values
    order = np.argsort(x.detach().numpy(), axis=-1)
    return torch.gather(x, -1, torch.from_numpy(order))


class PointNetEncoder(nn.Module):
    """Shared per-point MLP, multiscale pooling, bbox embedding, projection to ``feature_dim``."""

    def __init__(
        self,
        n_points: int = 1024,
        widths=(64, 128, 256),
        resolutions=(64, 128, 256, 512),
        aggregation: str = "mean",
        bbox_dim: int = 64,
        feature_dim: int = 256,
        hidden: int = 512,
        point_scale: float = 10.0,
        bbox_scale: float = 10.0,
        feature_norm: str = "unit",
    ):
        super().__init__()
        self.resolutions = tuple(k for k in resolutions if k <= n_points)
        if not self.resolutions:
            raise ConfigError(f"n_points={n_points} is below every pooling resolution {tuple(resolutions)}")
        self.min_points = max(self.resolutions)
        self.aggregation = aggregation
        self.point_scale = point_scale
        self.pointnet = mlp([3, *widths], final_act=True)
        self.bbox_embed = BBoxEmbedding(bbox_dim, bbox_scale)
        self.concat_dim = len(self.resolutions) * widths[-1] + bbox_dim
        self.norm_in = FeatureStandardizer(self.concat_dim)
        self.proj = nn.Sequential(*mlp([self.concat_dim, hidden, feature_dim]), FeatureNorm(feature_dim, feature_norm))

    def forward(self, points: torch.Tensor, bbox_dims: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm_in(self.pooled_features(points, bbox_dims)))

    def pooled_features(self, points: torch.Tensor, bbox_dims: torch.Tensor) -> torch.Tensor:
        """Multiscale-pooled point features concatenated with the bbox embedding (before projection)."""
        if points.ndim != 3 or points.shape[-1] != 3:
            raise ConfigError(f"expected (B, N, 3) points, got {tuple(points.shape)}")
        if points.shape[1] < self.min_points:
            raise ConfigError(f"point cloud has {points.shape[1]} points; this encoder needs >= {self.min_points}")
        per_point = self.pointnet(points * self.point_scale)
        pooled = multiscale_pool(per_point, self.resolutions, self.aggregation)
        return torch.cat([pooled, self.bbox_embed(bbox_dims)], dim=1)
