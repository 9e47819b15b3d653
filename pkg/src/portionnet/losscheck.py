"""Self-check of every loss function against closed-form oracles and finite differences.

The oracles below are written with ``math``/``numpy`` only and never call into
:mod:`portionnet.losses`, so a wrong constant in the loss module shows up as a
named failure.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from portionnet import losses
from portionnet.config import DistillWeights
from portionnet.errors import ConfigError

ORACLE_TOL = 1e-6
GRAD_RTOL = 1e-4


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    got: float | None = None
    expected: float | None = None
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        vals = ""
        if self.got is not None and self.expected is not None:
            vals = f"  got={self.got:.9g} expected={self.expected:.9g}"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.group:<16} {self.name}{vals}{extra}"


# ---------------------------------------------------------------- numpy oracles

def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def oracle_mse(a, p):
    return float(np.mean(np.sum((a - p) ** 2, axis=-1)))


def oracle_cos(a, p):
    num = np.sum(a * p, axis=-1)
    den = np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(p, axis=-1), 1e-8)
    return float(np.mean(1.0 - num / den))


def oracle_kl(a, p, T):
    P = _np_softmax(p / T)
    Q = _np_softmax(a / T)
    return float(np.mean(np.sum(P * (np.log(P) - np.log(Q)), axis=-1)))


def oracle_huber(r, delta):
    r = np.abs(np.asarray(r, dtype=np.float64))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - delta / 2))


def oracle_regression(vh, v, eh, e, delta):
    s = np.mean(np.abs(e))
    rv = vh - v
    re = (eh - e) / s
    return float(0.4 * (np.mean(np.abs(rv)) + np.mean(oracle_huber(rv, delta)))
                 + 0.6 * (np.mean(np.abs(re)) + np.mean(oracle_huber(re, delta))))


def oracle_smoothed_ce(logits, labels, eps):
    n, c = logits.shape
    y = np.full((n, c), eps / c)
    y[np.arange(n), labels] = 1 - eps + eps / c
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(np.mean(-(y * logp).sum(axis=1)))


# ---------------------------------------------------------------- checks

def _t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _value_checks() -> list[tuple[str, str, Callable[[], float], float]]:
    rng = np.random.default_rng(1234)
    a = rng.normal(size=(5, 256))
    p = rng.normal(size=(5, 256))
    w = DistillWeights()
    checks = [
        # feature-matching MSE
        ("distill_mse", "identical inputs", lambda: losses.distill_mse(_t(a), _t(a)), 0.0),
        ("distill_mse", "offset 0.1 in 256 dims", lambda: losses.distill_mse(_t(p + 0.1), _t(p)), 2.56),
        ("distill_mse", "zero vectors", lambda: losses.distill_mse(_t(np.zeros((2, 256))), _t(np.zeros((2, 256)))), 0.0),
        ("distill_mse", "random batch", lambda: losses.distill_mse(_t(a), _t(p)), oracle_mse(a, p)),
        # cosine alignment
        ("distill_cos", "parallel (2x)", lambda: losses.distill_cos(_t(2 * p), _t(p)), 0.0),
        ("distill_cos", "orthogonal", lambda: losses.distill_cos(_t([[1.0, 0.0]]), _t([[0.0, 3.0]])), 1.0),
        ("distill_cos", "antiparallel", lambda: losses.distill_cos(_t(-p), _t(p)), 2.0),
        ("distill_cos", "random batch", lambda: losses.distill_cos(_t(a), _t(p)), oracle_cos(a, p)),
        # softened-distribution KL
        ("distill_kl", "identical inputs", lambda: losses.distill_kl(_t(a), _t(a), 4.0), 0.0),
        (
            "distill_kl",
            "2-dim, T=1",
            lambda: losses.distill_kl(_t([[0.0, 0.0]]), _t([[math.log(2.0), 0.0]]), 1.0),
            (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3),
        ),
        ("distill_kl", "random batch, T=4", lambda: losses.distill_kl(_t(a), _t(p), 4.0), oracle_kl(a, p, 4.0)),
        (
            "distill_kl",
            "T^2 factor when enabled",
            lambda: losses.distill_kl(_t(a), _t(p), 4.0, t2_scale=True),
            16.0 * oracle_kl(a, p, 4.0),
        ),
        # combined distillation
        ("distill_total", "identical inputs", lambda: losses.distill_total(_t(a), _t(a), w), 0.0),
        (
            "distill_total",
            "0.7 mse + 0.2 cos + 0.1 kl",
            lambda: losses.distill_total(_t(a), _t(p), w),
            0.7 * oracle_mse(a, p) + 0.2 * oracle_cos(a, p) + 0.1 * oracle_kl(a, p, 4.0),
        ),
        (
            "distill_total",
            "weights (1,0,0) give mse",
            lambda: losses.distill_total(_t(a), _t(p), DistillWeights(w_mse=1, w_cos=0, w_kl=0)),
            oracle_mse(a, p),
        ),
        # smoothed cross-entropy
        (
            "classification",
            "uniform logits, C=108",
            lambda: losses.classification_loss(_t(np.zeros((4, 108))), torch.tensor([0, 5, 50, 107]), 0.05),
            math.log(108),
        ),
        (
            "classification",
            "true-class target, C=108",
            lambda: losses.smoothed_targets(torch.tensor([3]), 108, 0.05, torch.float64)[0, 3],
            0.95 + 0.05 / 108,
        ),
        (
            "classification",
            "eps=0, saturated correct logits",
            lambda: losses.classification_loss(_t([[60.0, 0.0, 0.0]]), torch.tensor([0]), 0.0),
            0.0,
        ),
        (
            "classification",
            "random logits, eps=0.05",
            lambda: losses.classification_loss(_t(a[:, :12]), torch.tensor([0, 3, 7, 11, 2]), 0.05),
            oracle_smoothed_ce(a[:, :12], np.array([0, 3, 7, 11, 2]), 0.05),
        ),
        # Huber
        ("huber", "r=0.25, delta=0.5", lambda: losses.huber(_t(0.25), 0.5), 0.03125),
        ("huber", "r=1.0, delta=0.5", lambda: losses.huber(_t(1.0), 0.5), 0.375),
        ("huber", "r=0", lambda: losses.huber(_t(0.0), 0.5), 0.0),
        ("huber", "r=-1.0, delta=0.5", lambda: losses.huber(_t(-1.0), 0.5), 0.375),
    ]

    v = np.array([100.0, 250.0, 40.0])
    e = np.array([80.0, 300.0, 20.0])
    r = np.array([0.3, -1.2, 0.05])
    vh = v + rng.normal(size=3)
    eh = e + rng.normal(scale=20.0, size=3)
    checks += [
        ("regression", "perfect predictions", lambda: losses.regression_loss(_t(v), _t(v), _t(e), _t(e)), 0.0),
        (
            "regression",
            "volume-only error",
            lambda: losses.regression_loss(_t(v + r), _t(v), _t(e), _t(e), 0.5),
            0.4 * float(np.mean(np.abs(r)) + np.mean(oracle_huber(r, 0.5))),
        ),
        (
            "regression",
            "energy-only error",
            lambda: losses.regression_loss(_t(v), _t(v), _t(e + r * e.mean()), _t(e), 0.5),
            0.6 * float(np.mean(np.abs(r)) + np.mean(oracle_huber(r, 0.5))),
        ),
        (
            "regression",
            "random errors",
            lambda: losses.regression_loss(_t(vh), _t(v), _t(eh), _t(e), 0.5),
            oracle_regression(vh, v, eh, e, 0.5),
        ),
    ]

    lc, lr_, ld = 1.3, 0.7, 2.9
    checks += [
        ("total", "all weights zero", lambda: losses.total_loss(_t(lc), _t(lr_), _t(ld), (0, 0, 0)).l_total, 0.0),
        ("total", "classification only", lambda: losses.total_loss(_t(lc), _t(lr_), _t(ld), (1, 0, 0)).l_total, lc),
        (
            "total",
            "default weights (1, 0.1, 0.5)",
            lambda: losses.total_loss(_t(lc), _t(lr_), _t(ld), (1.0, 0.1, 0.5)).l_total,
            lc + 0.1 * lr_ + 0.5 * ld,
        ),
    ]

    w0 = (1.0, 0.1, 0.5)
    checks += [
        (
            "gradnorm",
            "fixed point: weights unchanged",
            lambda: max(abs(x - y) for x, y in zip(losses.gradnorm_step([1, 1, 1], [2, 2, 2], [0.4] * 3, 1.5, w0), w0)),
            0.0,
        ),
        (
            "gradnorm",
            "over-target task weight decreases",
            lambda: float(losses.gradnorm_step([1, 1, 1], [1, 1, 1], [2.0, 0.5, 0.5], 1.5, (1, 1, 1))[0] < 1.0),
            1.0,
        ),
        (
            "gradnorm",
            "weight sum preserved",
            lambda: sum(losses.gradnorm_step([0.5, 2.0, 1.0], [1, 1, 0], [1.0, 0.2, 3.0], 1.5, w0)),
            sum(w0),
        ),
    ]
    return checks


def max_relative_grad_error(fn: Callable, inputs: tuple[torch.Tensor, ...], eps: float = 1e-6) -> float:
    """Largest relative error between autograd and central finite differences of a scalar ``fn``.

    Inputs must be float64 leaf tensors; only those with ``requires_grad`` are probed.
    """
    out = fn(*inputs)
    if out.numel() != 1:
        out = out.sum()
    probed = [x for x in inputs if x.requires_grad]
    grads = torch.autograd.grad(out, probed, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(probed, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn(*inputs).sum().item()
                flat[i] = orig - eps
                lo = fn(*inputs).sum().item()
                flat[i] = orig
                num[i] = (hi - lo) / (2 * eps)
            scale = max(float(num.abs().max()), float(g.abs().max()), 1e-6)
            worst = max(worst, float((g.view(-1) - num).abs().max()) / scale)
    return worst


def _grad_checks() -> list[tuple[str, Callable, tuple]]:
    gen = torch.Generator().manual_seed(7)

    def r(*shape, scale=1.0):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_()

    labels = torch.tensor([0, 2, 1, 4])
    v = torch.tensor([1.0, 2.0, 0.5, 1.5], dtype=torch.float64)
    e = torch.tensor([80.0, 120.0, 60.0, 200.0], dtype=torch.float64)
    return [
        ("distill_mse", losses.distill_mse, (r(4, 8), r(4, 8))),
        ("distill_cos", losses.distill_cos, (r(4, 8), r(4, 8))),
        ("distill_kl", lambda a, p: losses.distill_kl(a, p, 4.0), (r(4, 8), r(4, 8))),
        ("distill_total", lambda a, p: losses.distill_total(a, p), (r(4, 8), r(4, 8))),
        ("classification", lambda z: losses.classification_loss(z, labels, 0.05), (r(4, 5),)),
        # residuals kept away from the kinks at 0 and +-delta
        ("huber", lambda x: losses.huber(x, 0.5).sum(), (torch.tensor([0.2, -0.3, 0.9, -1.4], dtype=torch.float64, requires_grad=True),)),
        (
            "regression",
            lambda vh, eh: losses.regression_loss(vh, v, eh, e, 0.5),
            (
                (v + torch.tensor([0.2, -0.35, 0.8, -1.1], dtype=torch.float64)).requires_grad_(),
                (e + torch.tensor([15.0, -30.0, 5.0, 70.0], dtype=torch.float64)).requires_grad_(),
            ),
        ),
        (
            "total",
            lambda a, b, c: losses.total_loss(a, b, c, (1.0, 0.1, 0.5)).l_total,
            (r(1).squeeze().abs().detach().requires_grad_(), torch.tensor(0.7, dtype=torch.float64, requires_grad=True),
             torch.tensor(2.0, dtype=torch.float64, requires_grad=True)),
        ),
    ]


@contextlib.contextmanager
def perturbed(spec: str | None):
    """Temporarily override a module-level constant of :mod:`portionnet.losses`, e.g. ``VOLUME_WEIGHT=0.5``."""
    if not spec:
        yield
        return
    name, _, value = spec.partition("=")
    if not name.isupper() or not hasattr(losses, name) or not value:
        raise ConfigError(f"cannot perturb {spec!r}: expected NAME=VALUE for a loss-module constant")
    old = getattr(losses, name)
    setattr(losses, name, type(old)(value))
    try:
        yield
    finally:
        setattr(losses, name, old)


def run_checks(perturb: str | None = None, gradients: bool = True) -> list[CheckResult]:
    results: list[CheckResult] = []
    with perturbed(perturb), torch.no_grad():
        for group, name, fn, expected in _value_checks():
            try:
                got = float(fn())
                ok = math.isfinite(got) and abs(got - expected) <= ORACLE_TOL
                results.append(CheckResult(group, name, ok, got, float(expected)))
            except Exception as err:  # report, don't crash the whole suite
                results.append(CheckResult(group, name, False, detail=f"{type(err).__name__}: {err}"))
    if gradients:
        with perturbed(perturb):
            for group, fn, inputs in _grad_checks():
                err = max_relative_grad_error(fn, inputs)
                results.append(
                    CheckResult(group, "gradient vs central differences", err <= GRAD_RTOL,
                                detail=f"max rel err {err:.2e}")
                )
    return results


def report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    tail = f"{len(results) - failed}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.2f}s"
    return "\n".join(lines + [tail])


def main(perturb: str | None = None) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_checks(perturb)
    text = report(results, time.perf_counter() - t0)
    return all(r.passed for r in results), text
