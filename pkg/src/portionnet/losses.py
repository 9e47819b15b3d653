"""Distillation, classification and regression objectives plus task weighting.

All losses are means over the batch. The feature-matching MSE sums squared
differences over feature dimensions before averaging (a squared L2 norm per
sample), unlike ``F.mse_loss``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from portionnet.config import DistillWeights, TaskWeights
from portionnet.errors import ConfigError, TrainingError

COS_EPS = 1e-8
VOLUME_WEIGHT = 0.4
ENERGY_WEIGHT = 0.6


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def distill_mse(f_a: torch.Tensor, f_p: torch.Tensor) -> torch.Tensor:
    _same_shape(f_a, f_p)
    return ((f_a - f_p) ** 2).sum(dim=-1).mean()


def distill_cos(f_a: torch.Tensor, f_p: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    _same_shape(f_a, f_p)
    denom = (f_a.norm(dim=-1) * f_p.norm(dim=-1)).clamp_min(eps)
    return (1.0 - (f_a * f_p).sum(dim=-1) / denom).mean()


def distill_kl(f_a: torch.Tensor, f_p: torch.Tensor, temperature: float = 4.0, t2_scale: bool = False) -> torch.Tensor:
    """KL(softmax(f_p / T) || softmax(f_a / T)); the teacher distribution is the reference."""
    _same_shape(f_a, f_p)
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    log_p = F.log_softmax(f_p / temperature, dim=-1)
    log_q = F.log_softmax(f_a / temperature, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()
    return kl * temperature**2 if t2_scale else kl


def distill_terms(f_a, f_p, w: DistillWeights | None = None) -> dict[str, torch.Tensor]:
    w = w or DistillWeights()
    return {
        "mse": distill_mse(f_a, f_p),
        "cos": distill_cos(f_a, f_p),
        "kl": distill_kl(f_a, f_p, w.temperature, w.kl_t2_scale),
    }


def combine_distill(terms: dict[str, torch.Tensor], w: DistillWeights | None = None) -> torch.Tensor:
    w = w or DistillWeights()
    return w.w_mse * terms["mse"] + w.w_cos * terms["cos"] + w.w_kl * terms["kl"]


def distill_total(f_a, f_p, w: DistillWeights | None = None) -> torch.Tensor:
    return combine_distill(distill_terms(f_a, f_p, w), w)


def smoothed_targets(labels: torch.Tensor, n_classes: int, eps: float, dtype=torch.float32) -> torch.Tensor:
    y = torch.full((labels.shape[0], n_classes), eps / n_classes, dtype=dtype)
    y.scatter_(1, labels.unsqueeze(1), 1.0 - eps + eps / n_classes)
    return y


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 0.05) -> torch.Tensor:
    """Cross-entropy against label-smoothed targets (true class 1-eps+eps/C, others eps/C)."""
    n_classes = logits.shape[-1]
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ConfigError("labels must be a 1-D tensor matching the logits batch")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"label outside [0, {n_classes})")
    y = smoothed_targets(labels, n_classes, eps, logits.dtype).to(logits.device)
    return -(y * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def huber(residual: torch.Tensor, delta: float = 0.5) -> torch.Tensor:
    """Elementwise Huber penalty: 0.5 r^2 inside |r| <= delta, delta (|r| - delta/2) outside."""
    r = residual.abs()
    return torch.where(r <= delta, 0.5 * residual**2, delta * (r - 0.5 * delta))


def _l1_plus_huber(pred, target, delta):
    r = pred - target
    return r.abs().mean() + huber(r, delta).mean()


def regression_loss(v_hat, v, e_hat, e, delta: float = 0.5, energy_scale=None) -> torch.Tensor:
    """0.4 (L1 + Huber) on volume plus 0.6 (L1 + Huber) on normalised energy.

    Energies are divided by ``energy_scale``, which defaults to the batch mean
    of ``|e|``; pass the scale of the full accumulation group to keep
    micro-batched gradients identical to a single large batch.
    """
    _same_shape(v_hat, v)
    _same_shape(e_hat, e)
    if v.numel() == 0:
        raise ConfigError("regression loss of an empty batch")
    if energy_scale is None:
        energy_scale = e.abs().mean()
    return VOLUME_WEIGHT * _l1_plus_huber(v_hat, v, delta) + ENERGY_WEIGHT * _l1_plus_huber(
        e_hat / energy_scale, e / energy_scale, delta
    )


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


@dataclass
class LossBundle:
    l_cls: torch.Tensor
    l_reg: torch.Tensor
    l_distill: torch.Tensor
    l_total: torch.Tensor
    weights: tuple[float, float, float]
    distill_terms: dict[str, torch.Tensor] = field(default_factory=dict)

    def check_identity(self, tol: float = 1e-6) -> None:
        lc, lr, ld = self.weights
        expected = lc * _f(self.l_cls) + lr * _f(self.l_reg) + ld * _f(self.l_distill)
        if abs(_f(self.l_total) - expected) > tol * max(1.0, abs(expected)):
            raise TrainingError(f"weighted-sum identity violated: total={_f(self.l_total)} expected={expected}")

    def as_dict(self) -> dict[str, float]:
        out = {
            "l_cls": _f(self.l_cls),
            "l_reg": _f(self.l_reg),
            "l_distill": _f(self.l_distill),
            "l_total": _f(self.l_total),
            "lambda_cls": self.weights[0],
            "lambda_reg": self.weights[1],
            "lambda_distill": self.weights[2],
        }
        out.update({f"distill_{k}": _f(v) for k, v in self.distill_terms.items()})
        return out


def total_loss(l_cls, l_reg, l_distill, weights, distill_terms=None) -> LossBundle:
    """Weighted sum of the three task losses; aborts on any non-finite component."""
    if isinstance(weights, TaskWeights):
        weights = weights.as_tuple()
    weights = tuple(float(x) for x in weights)
    for name, v in (("cls", l_cls), ("reg", l_reg), ("distill", l_distill)):
        value = _f(v)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss: {value}")
    total = weights[0] * l_cls + weights[1] * l_reg + weights[2] * l_distill
    bundle = LossBundle(l_cls, l_reg, l_distill, total, weights, dict(distill_terms or {}))
    bundle.check_identity()
    return bundle


def gradnorm_step(task_losses, initial_losses, grad_norms, alpha: float, weights, lr: float = 0.025):
    """One GradNorm update of the task weights.

    ``grad_norms`` are the norms of each *weighted* task loss's gradient at the
    shared layer. Each weight takes a gradient step on
    ``sum_i |G_i - mean(G) * r_i**alpha|`` (targets held constant), where
    ``r_i`` is the task's loss ratio relative to the mean ratio; the weights are
    then rescaled to keep their sum. Returns a tuple of new weights.
    """
    L = [float(x) for x in task_losses]
    L0 = [float(x) for x in initial_losses]
    G = [float(x) for x in grad_norms]
    w = [float(x) for x in weights]
    if not (len(L) == len(L0) == len(G) == len(w)):
        raise ConfigError("gradnorm inputs must have equal length")
    ratios = [li / l0 if l0 > 0 else 1.0 for li, l0 in zip(L, L0)]
    mean_ratio = sum(ratios) / len(ratios)
    rel = [r / mean_ratio if mean_ratio > 0 else 1.0 for r in ratios]
    g_mean = sum(G) / len(G)
    new = []
    for wi, gi, ri in zip(w, G, rel):
        target = g_mean * ri**alpha
        # dG_i/dw_i = G_i / w_i (the unweighted gradient norm)
        unweighted = gi / wi if wi > 0 else 0.0
        gap = gi - target
        # equal norms can differ from their mean in the last ulp
        sign = 0 if abs(gap) <= 1e-12 * max(abs(gi), abs(target)) else (gap > 0) - (gap < 0)
        new.append(max(wi - lr * sign * unweighted, 1e-6))
    total = sum(w)
    s = sum(new)
    return tuple(x * total / s for x in new)
