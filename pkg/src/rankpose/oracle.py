"""Brute-force reference implementations of every loss and gradient.

These deliberately share no arithmetic with the vectorized kernels in
``losses``: plain Python floats, literal double loops over pairs, and a
local step function.  They exist to be slow and obviously correct, and
back the ``verify`` command's kernel-vs-oracle equivalence report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .heatmap import GridShape, HeatmapField, PixelPartition
from .losses import LossOutput, kl_loss, mse_loss
from .metrics import InstanceRecord

__all__ = [
    "brute_rank",
    "brute_sort",
    "brute_isort",
    "brute_isort_scores",
    "FiniteDiffReport",
    "finite_diff_check",
    "random_rank_case",
    "random_sort_case",
    "random_isort_case",
    "run_equivalence_suite",
]


def _step(x: float, delta: float) -> float:
    if x < -delta:
        return 0.0
    if x > delta:
        return 1.0
    return x / (2.0 * delta) + 0.5


def _hard(x: float) -> float:
    if x > 0.0:
        return 1.0
    if x == 0.0:
        return 0.5
    return 0.0


def brute_rank(pred: HeatmapField, part: PixelPartition, delta: float) -> LossOutput:
    """Spatial Rank by literal pairwise enumeration."""
    v = [float(x) for x in pred.values]
    pos = [int(i) for i in part.positives]
    if not pos:
        raise ValueError("spatial rank needs at least one positive cell")
    is_neg = [True] * len(v)
    for i in pos:
        is_neg[i] = False

    grad = [0.0] * len(v)
    value = 0.0
    hard = 0.0
    for i in pos:
        den = 0.0
        num = 0.0
        hden = 0.0
        hnum = 0.0
        for j in range(len(v)):
            h = _step(v[j] - v[i], delta)
            den += h
            hh = _hard(v[j] - v[i])
            hden += hh
            if is_neg[j]:
                num += h
                hnum += hh
        value += num / den
        hard += hnum / hden
        for j in range(len(v)):
            if is_neg[j]:
                primary = _step(v[j] - v[i], delta) / den
                grad[i] -= primary
                grad[j] += primary
    np_grad = np.array(grad) / len(pos)
    return LossOutput(value / len(pos), np_grad, hard / len(pos))


def _brute_sort_scores(scores: Sequence[float], quality: Sequence[float], delta: float):
    """Sorting error, target error and pairwise transfers for one group."""
    m = len(scores)
    value = 0.0
    hard = 0.0
    grad = [0.0] * m
    for variant in ("smooth", "hard"):
        step = (lambda x: _step(x, delta)) if variant == "smooth" else _hard
        total = 0.0
        for i in range(m):
            rank_all = 0.0
            cur = 0.0
            den_star = 0.0
            tar = 0.0
            for j in range(m):
                h = step(scores[j] - scores[i])
                rank_all += h
                cur += h * (1.0 - quality[j])
                if quality[j] >= quality[i]:
                    den_star += h
                    tar += h * (1.0 - quality[j])
            total += cur / rank_all - tar / den_star
            if variant == "smooth":
                for j in range(m):
                    h = step(scores[j] - scores[i])
                    primary = h * (1.0 - quality[j]) / rank_all
                    if quality[j] >= quality[i]:
                        primary -= h * (1.0 - quality[j]) / den_star
                    grad[i] -= primary
                    grad[j] += primary
        if variant == "smooth":
            value = total / m
        else:
            hard = total / m
    return value, [g / m for g in grad], hard


def brute_sort(pred: HeatmapField, part: PixelPartition, delta: float) -> LossOutput:
    """Spatial Sort by literal pairwise enumeration over positive cells."""
    pos = [int(i) for i in part.positives]
    if not pos:
        raise ValueError("spatial sort needs at least one positive cell")
    scores = [float(pred.values[i]) for i in pos]
    quality = [float(x) for x in part.positive_labels]
    value, gpos, hard = _brute_sort_scores(scores, quality, delta)
    grad = np.zeros(pred.values.size)
    for i, g in zip(pos, gpos):
        grad[i] += g
    return LossOutput(value, grad, hard)


def brute_isort_scores(confidences: Sequence[float], ks: Sequence[float], delta: float) -> LossOutput:
    if len(confidences) < 2:
        return LossOutput(0.0, np.zeros(len(confidences)), 0.0, skipped=True)
    value, grad, hard = _brute_sort_scores(
        [float(c) for c in confidences], [float(k) for k in ks], delta)
    return LossOutput(value, np.array(grad), hard)


def brute_isort(batch: Sequence[InstanceRecord], delta: float) -> LossOutput:
    """Instance Sort by literal pairwise enumeration, with its own KS arithmetic."""
    conf = [float(rec.confidence) for rec in batch]
    ks = []
    for rec in batch:
        d2 = (rec.pred_coord[0] - rec.gt_coord[0]) ** 2 + (rec.pred_coord[1] - rec.gt_coord[1]) ** 2
        ks.append(math.exp(-d2 / (2.0 * rec.area * rec.area * rec.falloff * rec.falloff)))
    return brute_isort_scores(conf, ks, delta)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error: float


def finite_diff_check(loss_fn: Callable, inputs: tuple, epsilon: float = 1e-5) -> FiniteDiffReport:
    """Compare an analytic gradient against central finite differences.

    Only applies to ``mse_loss`` and ``kl_loss``: the ranking losses use
    error-driven updates that intentionally differ from the true gradient,
    which vanishes almost everywhere, so checking them against finite
    differences is a contract violation and is rejected.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if loss_fn is mse_loss:
        pred, label = inputs
        analytic = mse_loss(pred, label).grad

        def value_at(flat: np.ndarray) -> float:
            return mse_loss(HeatmapField(pred.shape, flat, pred.keypoint_id), label).value

        base = pred.values
    elif loss_fn is kl_loss:
        px, py, tx, ty, beta = inputs
        analytic = kl_loss(px, py, tx, ty, beta).grad
        nx = px.values.size

        def value_at(flat: np.ndarray) -> float:
            fx = HeatmapField(px.shape, flat[:nx], px.keypoint_id)
            fy = HeatmapField(py.shape, flat[nx:], py.keypoint_id)
            return kl_loss(fx, fy, tx, ty, beta).value

        base = np.concatenate([px.values, py.values])
    else:
        raise ValueError(
            "finite_diff_check only accepts mse_loss or kl_loss; ranking losses use "
            "error-driven updates whose surrogate gradient is not a derivative")

    max_rel = 0.0
    max_abs = 0.0
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        fd = (value_at(hi) - value_at(lo)) / (2.0 * epsilon)
        err = abs(fd - analytic[i])
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(fd), abs(analytic[i]), 1e-12))
    return FiniteDiffReport(max_rel, max_abs)


def _with_ties(rng: np.random.Generator, values: np.ndarray) -> np.ndarray:
    # Exact ties exercise the H(0) = 0.5 convention.
    if values.size >= 2 and rng.random() < 0.3:
        a, b = rng.choice(values.size, size=2, replace=False)
        values[b] = values[a]
    return values


def random_rank_case(rng: np.random.Generator):
    h = int(rng.integers(1, 9))
    w = int(rng.integers(1, 7))
    n = h * w
    conf = _with_ties(rng, rng.normal(0.0, 1.0, n))
    npos = int(rng.integers(1, min(10, n) + 1))
    pos = np.sort(rng.choice(n, size=npos, replace=False))
    neg = np.setdiff1d(np.arange(n), pos)
    labels = _with_ties(rng, rng.uniform(0.05, 1.0, npos))
    part = PixelPartition(pos, neg, labels, 0.0)
    pred = HeatmapField(GridShape(h, w), conf)
    delta = float(rng.uniform(0.05, 2.0))
    return pred, part, delta


random_sort_case = random_rank_case


def random_isort_case(rng: np.random.Generator):
    m = int(rng.integers(2, 17))
    conf = _with_ties(rng, rng.normal(0.0, 1.0, m))
    ks = _with_ties(rng, rng.uniform(0.01, 1.0, m))
    delta = float(rng.uniform(0.05, 2.0))
    return conf, ks, delta


def run_equivalence_suite(num_cases: int = 1000, seed: int = 0, tolerance: float = 1e-9) -> dict:
    """Kernel-vs-oracle comparison over seeded random cases.

    Returns a JSON-ready report with per-loss maxima and any cases whose
    value or gradient difference exceeds ``tolerance``.
    """
    from . import losses

    rng = np.random.default_rng(seed)
    report: dict = {"seed": seed, "num_cases": num_cases, "tolerance": tolerance, "losses": {}}
    specs = {
        "spatial_rank": (random_rank_case, losses.spatial_rank, brute_rank),
        "spatial_sort": (random_sort_case, losses.spatial_sort, brute_sort),
        "instance_sort": (random_isort_case, None, None),
    }
    for name, (gen, kernel, reference) in specs.items():
        max_v = 0.0
        max_g = 0.0
        failures = []
        for case in range(num_cases):
            args = gen(rng)
            if name == "instance_sort":
                conf, ks, delta = args
                got = losses.instance_sort_scores(conf, ks, delta)
                want = brute_isort_scores(conf, ks, delta)
            else:
                got = kernel(*args)
                want = reference(*args)
            dv = abs(got.value - want.value)
            dg = float(np.max(np.abs(got.grad - want.grad))) if got.grad.size else 0.0
            dh = abs(got.hard_value - want.hard_value)
            max_v = max(max_v, dv, dh)
            max_g = max(max_g, dg)
            if dv > tolerance or dg > tolerance or dh > tolerance:
                failures.append({"case": case, "value_diff": dv, "grad_diff": dg})
        report["losses"][name] = {
            "max_value_diff": max_v,
            "max_grad_diff": max_g,
            "failures": failures,
        }
    report["ok"] = all(not entry["failures"] for entry in report["losses"].values())
    return report
