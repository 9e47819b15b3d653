"""RGB-to-geometry adapter: the student that mimics the point-cloud teacher."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class Adapter(nn.Module):
    """Two affine layers with one ReLU between them; no normalisation."""

    def __init__(self, feature_dim: int = 256, hidden: int = 512):
        super().__init__()
        self.layer1 = nn.Linear(feature_dim, hidden)
        self.layer2 = nn.Linear(hidden, feature_dim)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.layer2(F.relu(self.layer1(rgb)))
