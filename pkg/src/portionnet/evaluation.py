"""Regression/classification metrics and the two inference modes (RGB, RGB+PC)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch

from portionnet.errors import ConfigError

EvalMode = Literal["rgb", "rgbpc"]


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(true, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ConfigError(f"prediction/target shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ConfigError("metric of an empty array")
    return p, t


def mae(pred, true) -> float:
    p, t = _pair(pred, true)
    return float(np.mean(np.abs(p - t)))


def mape(pred, true) -> float:
    """Mean absolute percentage error, in percent."""
    p, t = _pair(pred, true)
    if np.any(t == 0):
        raise ConfigError(f"MAPE undefined: {int(np.sum(t == 0))} zero target value(s)")
    return float(100.0 * np.mean(np.abs(p - t) / np.abs(t)))


def r2(pred, true) -> float:
    p, t = _pair(pred, true)
    if p.size < 2:
        raise ConfigError("R^2 needs at least two samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0:
        raise ConfigError("R^2 undefined: targets have zero variance")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def pooled_r2(preds: list, trues: list) -> float:
    """R^2 over several targets pooled after standardising each by its true mean/std."""
    ps, ts = [], []
    for pred, true in zip(preds, trues):
        p, t = _pair(pred, true)
        mu, sd = t.mean(), t.std()
        if sd == 0:
            raise ConfigError("R^2 undefined: targets have zero variance")
        ps.append((p - mu) / sd)
        ts.append((t - mu) / sd)
    return r2(np.concatenate(ps), np.concatenate(ts))


def accuracy(logits, labels) -> float:
    """Top-1 accuracy in percent; argmax ties go to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).ravel()
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigError("logits must be (B, C) with B matching labels")
    if labels.size == 0:
        raise ConfigError("accuracy of an empty batch")
    return float(100.0 * np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class MetricsReport:
    mode: str
    accuracy: float
    volume_mae: float
    volume_mape: float
    energy_mae: float
    energy_mape: float
    r2: float
    volume_r2: float
    energy_r2: float
    n_samples: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


METRIC_FIELDS = ("accuracy", "volume_mae", "volume_mape", "energy_mae", "energy_mape", "r2", "volume_r2", "energy_r2")


def report_from_predictions(mode, logits, labels, vol_pred, vol_true, en_pred, en_true, seed=None) -> MetricsReport:
    return MetricsReport(
        mode=mode,
        accuracy=accuracy(logits, labels),
        volume_mae=mae(vol_pred, vol_true),
        volume_mape=mape(vol_pred, vol_true),
        energy_mae=mae(en_pred, en_true),
        energy_mape=mape(en_pred, en_true),
        r2=pooled_r2([vol_pred, en_pred], [vol_true, en_true]),
        volume_r2=r2(vol_pred, vol_true),
        energy_r2=r2(en_pred, en_true),
        n_samples=int(np.asarray(labels).size),
        seed=seed,
    )


def _training_mode(mode: str):
    from portionnet.model import TrainingMode

    if mode == "rgb":
        return TrainingMode.RGB_ONLY
    if mode == "rgbpc":
        return TrainingMode.MULTIMODAL
    raise ConfigError(f"unknown evaluation mode {mode!r}; expected 'rgb' or 'rgbpc'")


@torch.no_grad()
def predict(model, dataset, mode: EvalMode, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Forward the whole dataset without touching parameters.

    ``rgb`` feeds adapter features into fusion and never reads the point cloud;
    ``rgbpc`` feeds the teacher's point-cloud features.
    """
    tmode = _training_mode(mode)
    if dataset.class_count != model.config.class_count:
        raise ConfigError(f"dataset has {dataset.class_count} classes, model expects {model.config.class_count}")
    arrays = dataset.arrays()
    was_training = model.training
    model.eval()
    try:
        logits, vol, en = [], [], []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            images = torch.from_numpy(arrays["images"][sl])
            if mode == "rgb":
                out = model(images, mode=tmode, need_teacher=False)
            else:
                out = model(images, torch.from_numpy(arrays["points"][sl]), torch.from_numpy(arrays["bbox"][sl]), mode=tmode)
            logits.append(out.logits.double().numpy())
            vol.append(out.volume.double().numpy())
            en.append(out.energy.double().numpy())
    finally:
        model.train(was_training)
    return {
        "logits": np.concatenate(logits),
        "volume": np.concatenate(vol),
        "energy": np.concatenate(en),
        "labels": arrays["labels"],
        "volume_true": arrays["volume"],
        "energy_true": arrays["energy"],
    }


def evaluate(model, dataset, mode: EvalMode, batch_size: int = 64, seed: int | None = None) -> MetricsReport:
    p = predict(model, dataset, mode, batch_size)
    return report_from_predictions(
        mode, p["logits"], p["labels"], p["volume"], p["volume_true"], p["energy"], p["energy_true"], seed
    )


def mean_baseline(train_set, test_set) -> MetricsReport:
    """Predict the training-set mean volume/energy and the most frequent class for every test sample."""
    tr = train_set.arrays()
    te = test_set.arrays()
    n = len(test_set)
    counts = np.bincount(tr["labels"], minlength=test_set.class_count)
    logits = np.tile(counts.astype(np.float64), (n, 1))
    vol = np.full(n, tr["volume"].mean())
    en = np.full(n, tr["energy"].mean())
    return MetricsReport(
        mode="mean-baseline",
        accuracy=accuracy(logits, te["labels"]),
        volume_mae=mae(vol, te["volume"]),
        volume_mape=mape(vol, te["volume"]),
        energy_mae=mae(en, te["energy"]),
        energy_mape=mape(en, te["energy"]),
        r2=pooled_r2([vol, en], [te["volume"], te["energy"]]),
        volume_r2=r2(vol, te["volume"]),
        energy_r2=r2(en, te["energy"]),
        n_samples=n,
    )


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean and sample standard deviation of every metric across runs (e.g. seeds)."""
    if not reports:
        raise ConfigError("nothing to aggregate")
    modes = {r.mode for r in reports}
    if len(modes) != 1:
        raise ConfigError(f"cannot aggregate reports from different modes: {sorted(modes)}")
    out = {"mode": reports[0].mode, "n_runs": len(reports), "seeds": [r.seed for r in reports]}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        }
    return out


def format_aggregate(agg: dict) -> str:
    lines = [f"mode={agg['mode']} runs={agg['n_runs']}"]
    for name in METRIC_FIELDS:
        lines.append(f"  {name:<12} {agg[name]['mean']:10.4f} ± {agg[name]['std']:.4f}")
    return "\n".join(lines)

