"""The assembled model: encoders, adapter, fusion and heads behind one forward pass."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from portionnet.adapter import Adapter
from portionnet.config import ModelConfig
from portionnet.encoders import ConvBackbone, PatchBackbone, PointNetEncoder, RGBEncoder, torchvision_backbones
from portionnet.errors import ConfigError
from portionnet.fusion import ClassificationHead, CrossModalFusion, EnergyHead, VolumeHead


class TrainingMode(str, enum.Enum):
    MULTIMODAL = "multimodal"  # teacher (point-cloud) features feed fusion
    RGB_ONLY = "rgb_only"  # adapter features feed fusion


@dataclass
class ModelOutput:
    logits: torch.Tensor
    volume: torch.Tensor  # mL
    energy: torch.Tensor  # kcal
    volume_norm: torch.Tensor  # volume / volume_scale
    energy_norm: torch.Tensor  # energy / energy_scale
    rgb: torch.Tensor
    adapted: torch.Tensor
    teacher: torch.Tensor | None
    fused: torch.Tensor


class PortionNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, backbones: tuple[nn.Module, nn.Module] | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        if backbones is None:
            if cfg.backbones == "torchvision":
                backbones = torchvision_backbones(pretrained=False)
            else:
                backbones = (PatchBackbone(cfg.backbone_dims[0]), ConvBackbone(cfg.backbone_dims[1]))
        d = cfg.feature_dim
        self.rgb = RGBEncoder(*backbones, feature_dim=d, hidden=cfg.proj_hidden, feature_norm=cfg.feature_norm)
        self.geo = PointNetEncoder(
            n_points=cfg.n_points,
            widths=cfg.pointnet_widths,
            resolutions=cfg.pool_resolutions,
            aggregation=cfg.pool_aggregation,
            bbox_dim=cfg.bbox_embed_dim,
            feature_dim=d,
            hidden=cfg.proj_hidden,
            point_scale=cfg.point_scale,
            bbox_scale=cfg.bbox_scale,
            feature_norm=cfg.feature_norm,
        )
        self.adapter = Adapter(d, cfg.adapter_hidden)
        self.fusion = CrossModalFusion(d, cfg.attention_heads, cfg.fusion_hidden)
        self.head = nn.ModuleDict(
            {
                "cls": ClassificationHead(d, cfg.class_count, cfg.cls_hidden),
                "vol": VolumeHead(d),
                "energy": EnergyHead(d, cfg.energy_hidden),
            }
        )
        self.register_buffer("volume_scale", torch.tensor(1.0))
        self.register_buffer("energy_scale", torch.tensor(1.0))

    def set_target_scales(self, volume: float, energy: float) -> None:
        if not (volume > 0 and energy > 0):
            raise ConfigError("target scales must be positive")
        self.volume_scale.fill_(volume)
        self.energy_scale.fill_(energy)

    @torch.no_grad()
    def fit_input_statistics(self, images, points, bbox, batch_size: int = 64) -> None:
        """Fit both encoders' feature standardizers on a training set (call once, before training)."""
        rgb, geo = [], []
        for start in range(0, images.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            rgb.append(self.rgb.backbone_features(images[sl]))
            geo.append(self.geo.pooled_features(points[sl], bbox[sl]))
        self.rgb.norm_in.fit(torch.cat(rgb))
        self.geo.norm_in.fit(torch.cat(geo))

    # both modality encoders (including their projections) form the slow group;
    # adapter, fusion and heads form the fast group
    ENCODER_PREFIXES = ("rgb.", "geo.")

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(self.ENCODER_PREFIXES)]

    def head_parameters(self):
        """RGB projection, adapter, fusion and task heads."""
        return [p for n, p in self.named_parameters() if not n.startswith(self.ENCODER_PREFIXES)]

    def forward(self, images, points=None, bbox=None, mode: TrainingMode = TrainingMode.RGB_ONLY, need_teacher: bool = True) -> ModelOutput:
        mode = TrainingMode(mode)
        rgb = self.rgb(images)
        adapted = self.adapter(rgb)
        teacher = None
        if points is not None and (mode is TrainingMode.MULTIMODAL or need_teacher):
            teacher = self.geo(points, bbox)
        if mode is TrainingMode.MULTIMODAL:
            if teacher is None:
                raise ConfigError("multimodal mode needs points and bbox dims")
            geo_in = teacher
        else:
            geo_in = adapted
        fused = self.fusion(rgb, geo_in)
        logits = self.head["cls"](fused)
        vnorm = self.head["vol"](fused)
        enorm = self.head["energy"](fused, vnorm)
        return ModelOutput(
            logits=logits,
            volume=vnorm * self.volume_scale,
            energy=enorm * self.energy_scale,
            volume_norm=vnorm,
            energy_norm=enorm,
            rgb=rgb,
            adapted=adapted,
            teacher=teacher,
            fused=fused,
        )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(model: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
