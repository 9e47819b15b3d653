"""Dual-mode distillation training: mode schedule, LR schedule, accumulation, clipping."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from portionnet import losses
from portionnet.checkpoint import save_checkpoint
from portionnet.config import RunConfig, TrainingConfig
from portionnet.errors import ConfigError, TrainingError
from portionnet.evaluation import evaluate
from portionnet.model import PortionNet, TrainingMode

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pnck"
METRICS_LOG = "metrics.jsonl"
STEPS_LOG = "steps.jsonl"


def select_mode(batch_index: int, alpha: float, seed: int) -> TrainingMode:
    """RGB-only iff a counter-based uniform draw keyed by (seed, batch_index) is below alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return TrainingMode.MULTIMODAL
    if alpha == 1.0:
        return TrainingMode.RGB_ONLY
    bitgen = np.random.Philox(key=seed & (2**64 - 1), counter=batch_index)
    draw = np.random.Generator(bitgen).random()
    return TrainingMode.RGB_ONLY if draw < alpha else TrainingMode.MULTIMODAL


def _cos_interp(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def onecycle_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.10,
                div_start: float = 25.0, div_final: float = 1e4) -> float:
    """Cosine warmup from base/div_start to base, then cosine anneal to base/div_final."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = math.floor(warmup_fraction * total_steps)
    if step <= warm:
        if warm == 0:
            return base_lr
        return _cos_interp(base_lr / div_start, base_lr, step / warm)
    return _cos_interp(base_lr, base_lr / div_final, (step - warm) / (total_steps - warm))


def global_grad_norm(params) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad.mul_(scale)
    return norm


def batch_tensors(dataset) -> dict[str, torch.Tensor]:
    a = dataset.arrays()
    return {
        "images": torch.from_numpy(a["images"]),
        "points": torch.from_numpy(a["points"]),
        "bbox": torch.from_numpy(a["bbox"]),
        "labels": torch.from_numpy(a["labels"]),
        "volume": torch.from_numpy(a["volume"]).float(),
        "energy": torch.from_numpy(a["energy"]).float(),
    }


def compute_losses(model, data, idx, mode, tc: TrainingConfig, weights, energy_scale) -> losses.LossBundle:
    out = model(data["images"][idx], data["points"][idx], data["bbox"][idx], mode=mode, need_teacher=True)
    l_cls = losses.classification_loss(out.logits, data["labels"][idx], tc.label_smoothing)
    # volume regressed in units of the training-set mean volume
    l_reg = losses.regression_loss(
        out.volume_norm,
        data["volume"][idx] / model.volume_scale,
        out.energy,
        data["energy"][idx],
        tc.huber_delta,
        energy_scale=energy_scale,
    )
    terms = losses.distill_terms(out.adapted, out.teacher.detach(), tc.distill)
    l_distill = losses.combine_distill(terms, tc.distill)
    return losses.total_loss(l_cls, l_reg, l_distill, weights, terms)


def accumulate_gradients(model, data, group_idx: torch.Tensor, mode, tc: TrainingConfig, weights,
                         micro_batch: int | None = None) -> dict[str, float]:
    """Zero grads, then backpropagate every micro-batch of one optimizer step.

    Each micro-batch loss is weighted by its share of the group, so the summed
    gradient equals that of the mean loss over the whole group. Returns the
    group-mean loss bundle as floats.
    """
    micro_batch = micro_batch or tc.micro_batch
    model.zero_grad(set_to_none=True)
    n = len(group_idx)
    energy_scale = data["energy"][group_idx].abs().mean()
    summary: dict[str, float] = {}
    for start in range(0, n, micro_batch):
        idx = group_idx[start : start + micro_batch]
        bundle = compute_losses(model, data, idx, mode, tc, weights, energy_scale)
        share = len(idx) / n
        (bundle.l_total * share).backward()
        for k, v in bundle.as_dict().items():
            summary[k] = summary.get(k, 0.0) + share * v if not k.startswith("lambda_") else v
    return summary


def optimizer_step(model, optimizer, data, group_idx, mode, tc: TrainingConfig, weights,
                   micro_batch: int | None = None) -> tuple[dict[str, float], float]:
    """Accumulate gradients over the group, clip, and apply one optimizer update.

    Returns the loss summary and the pre-clip gradient norm.
    """
    summary = accumulate_gradients(model, data, group_idx, mode, tc, weights, micro_batch)
    grad_norm = clip_gradients([p for p in model.parameters()], tc.clip_norm)
    optimizer.step()
    return summary, grad_norm


def _gradnorm_probe(model) -> torch.nn.Parameter:
    # last layer of the RGB projection: upstream of every task, including distillation
    return model.rgb.proj[-2].weight


def _task_grad_norms(model, data, idx, mode, tc, weights, energy_scale):
    bundle = compute_losses(model, data, idx, mode, tc, weights, energy_scale)
    probe = _gradnorm_probe(model)
    norms = []
    for w, l in zip(weights, (bundle.l_cls, bundle.l_reg, bundle.l_distill)):
        (g,) = torch.autograd.grad(w * l, probe, retain_graph=True, allow_unused=True)
        norms.append(0.0 if g is None else float(g.norm()))
    return norms, [float(x.detach()) for x in (bundle.l_cls, bundle.l_reg, bundle.l_distill)]


def make_optimizer(model: PortionNet, tc: TrainingConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [
            {"params": model.encoder_parameters(), "lr": tc.lr_encoders, "base_lr": tc.lr_encoders, "name": "encoders"},
            {"params": model.head_parameters(), "lr": tc.lr_heads, "base_lr": tc.lr_heads, "name": "heads_adapter"},
        ],
        weight_decay=tc.weight_decay,
    )


def set_lr(optimizer, step: int, total_steps: int, tc: TrainingConfig) -> list[float]:
    factor = onecycle_lr(step, total_steps, 1.0, tc.warmup_fraction, tc.div_start, tc.div_final)
    lrs = []
    for g in optimizer.param_groups:
        g["lr"] = g["base_lr"] * factor
        lrs.append(g["lr"])
    return lrs


@dataclass
class TrainResult:
    model: PortionNet
    optimizer: torch.optim.Optimizer
    history: list[dict] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)
    mode_counts: dict[str, int] = field(default_factory=dict)
    checkpoint_path: Path | None = None


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def checkpoint_metadata(config: RunConfig, epoch: int, history, weights) -> dict:
    return {
        "epoch": epoch,
        "seed": config.training.seed,
        "config": config.model_dump(mode="json"),
        "config_digest": config_digest(config),
        "arch_digest": config.model.digest(),
        "task_weights": list(weights),
        "metric_history": history,
        "torch_version": torch.__version__,
    }


def config_digest(config: RunConfig) -> str:
    import hashlib

    blob = json.dumps(config.model_dump(mode="json"), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train(train_set, config: RunConfig, val_set=None, out_dir=None) -> TrainResult:
    """Train a fresh model on ``train_set``; validate on ``val_set`` after every epoch in both modes.

    With ``out_dir`` set, the checkpoint is rewritten after every epoch and
    per-epoch/per-step records are appended to JSON-lines logs.
    """
    tc = config.training
    if train_set.class_count != config.model.class_count:
        raise ConfigError(f"dataset has {train_set.class_count} classes, model expects {config.model.class_count}")
    seed_everything(tc.seed)
    model = PortionNet(config.model)
    data = batch_tensors(train_set)
    model.set_target_scales(float(data["volume"].mean()), float(data["energy"].mean()))
    model.fit_input_statistics(data["images"], data["points"], data["bbox"])
    model.train()
    optimizer = make_optimizer(model, tc)

    n = len(train_set)
    eff = tc.effective_batch
    steps_per_epoch = math.ceil(n / eff)
    total_steps = tc.epochs * steps_per_epoch
    weights = tc.task_weights.as_tuple()
    initial_losses = None

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / CHECKPOINT_NAME if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in (METRICS_LOG, STEPS_LOG):
            (out / name).write_text("")

    result = TrainResult(model, optimizer, checkpoint_path=ckpt_path, mode_counts={m.value: 0 for m in TrainingMode})
    last_good = None
    step = 0
    for epoch in range(tc.epochs):
        perm = torch.from_numpy(np.random.default_rng([tc.seed, epoch]).permutation(n))
        epoch_sums: dict[str, float] = {}
        for start in range(0, n, eff):
            group = perm[start : start + eff]
            mode = select_mode(step, tc.alpha, tc.seed)
            result.mode_counts[mode.value] += 1
            lrs = set_lr(optimizer, step, total_steps, tc)
            try:
                if tc.task_weights.gradnorm:
                    energy_scale = data["energy"][group].abs().mean()
                    norms, task_l = _task_grad_norms(model, data, group[: tc.micro_batch], mode, tc, weights, energy_scale)
                    if initial_losses is None:
                        initial_losses = task_l
                summary, grad_norm = optimizer_step(model, optimizer, data, group, mode, tc, weights)
            except TrainingError as err:
                raise TrainingError(
                    f"epoch {epoch} step {step}: {err}; last good checkpoint: {ckpt_path or 'in memory'}",
                    last_good_state=last_good,
                    last_good_path=ckpt_path if last_good is not None else None,
                ) from err
            if tc.task_weights.gradnorm:
                weights = losses.gradnorm_step(task_l, initial_losses, norms, tc.task_weights.gradnorm_alpha,
                                               weights, tc.task_weights.gradnorm_lr)
            record = {"step": step, "epoch": epoch, "mode": mode.value, "lr": lrs, "grad_norm": grad_norm, **summary}
            result.step_log.append(record)
            if out is not None:
                with open(out / STEPS_LOG, "a") as fh:
                    fh.write(json.dumps(record) + "\n")
            for k, v in summary.items():
                epoch_sums[k] = epoch_sums.get(k, 0.0) + v * len(group) / n
            step += 1

        entry = {"epoch": epoch, "loss": epoch_sums}
        if val_set is not None:
            entry["val"] = {m: evaluate(model, val_set, m, seed=tc.seed).to_dict() for m in ("rgb", "rgbpc")}
        result.history.append(entry)
        log.info("epoch %d loss %.4f", epoch, epoch_sums.get("l_total", float("nan")))
        if out is not None:
            with open(out / METRICS_LOG, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            save_checkpoint(ckpt_path, model, optimizer, checkpoint_metadata(config, epoch, result.history, weights))
        last_good = copy.deepcopy(model.state_dict())
    return result
