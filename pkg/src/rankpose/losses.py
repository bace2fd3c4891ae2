"""Ranking-based heatmap losses and baselines.

Spatial Rank pushes positive-cell confidences above negative-cell
confidences; Spatial Sort aligns the confidence ordering of positive
cells with their label ordering; Instance Sort aligns per-instance
argmax confidences with their keypoint-similarity scores.  All three
are step-function losses whose gradients come from the error-driven
update rule: grad[i] ~ sum_j L[j,i]*t[j,i] - sum_j L[i,j]*t[i,j],
where L is the per-pair primary term and t the pair indicator (rank
pairs are P x N, sort pairs P x P).

The step function is smoothed to a linear ramp of half-width delta.
Forward values are computed with the smoothed step so that value and
gradient are mutually consistent; the hard-step value is reported
separately in ``LossOutput.hard_value``.  Ties (including the self
pair) take H(0) = 0.5, which keeps every rank denominator >= 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .heatmap import GridShape, HeatmapField, LabelField, Mode, PixelPartition
from .metrics import InstanceRecord, keypoint_similarity

__all__ = [
    "LossConfig",
    "LossOutput",
    "PairTerms",
    "smoothed_step",
    "hard_step",
    "spatial_rank",
    "spatial_rank_many",
    "spatial_sort",
    "spatial_sort_many",
    "instance_sort",
    "instance_sort_scores",
    "mse_loss",
    "kl_loss",
    "total_loss",
    "rank_pair_terms",
    "sort_pair_terms",
]

# Loss hyperparameter presets (delta, coefficient) per backbone.
_PRESETS = {
    "vitpose_b": dict(rank_delta=0.4, rank_coeff=1.0, sort_delta=1.5, sort_coeff=2.0,
                      isort_delta=3.0, isort_coeff=0.25),
    "vitpose_h": dict(rank_delta=0.4, rank_coeff=1.0, sort_delta=1.5, sort_coeff=2.0,
                      isort_delta=3.0, isort_coeff=1.5),
    "simcc_r50": dict(rank_delta=0.4, rank_coeff=1.0, sort_delta=0.2, sort_coeff=0.25,
                      isort_delta=1.0, isort_coeff=0.0),
    "simcc_hrnet48": dict(rank_delta=0.3, rank_coeff=1.0, sort_delta=1.2, sort_coeff=0.5,
                          isort_delta=0.5, isort_coeff=0.1),
}


@dataclass(frozen=True)
class LossConfig:
    """Per-loss ramp half-widths (deltas) and weighting coefficients."""

    rank_delta: float = 0.4
    rank_coeff: float = 1.0
    sort_delta: float = 1.5
    sort_coeff: float = 2.0
    isort_delta: float = 3.0
    isort_coeff: float = 0.25
    positivity_threshold: float = 0.0

    def __post_init__(self) -> None:
        for name in ("rank_delta", "sort_delta", "isort_delta"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("rank_coeff", "sort_coeff", "isort_coeff"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.positivity_threshold < 1.0:
            raise ValueError("positivity_threshold must lie in [0, 1)")

    @classmethod
    def preset(cls, name: str) -> "LossConfig":
        if name not in _PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
        return cls(**_PRESETS[name])


@dataclass
class LossOutput:
    """Loss value plus the error-driven (or analytic) gradient.

    ``grad`` matches the layout of the scored input: one entry per cell
    for the spatial and baseline losses, one entry per instance for
    Instance Sort (mapped onto argmax cells by the caller).  ``skipped``
    marks degenerate Instance Sort batches (< 2 instances).
    """

    value: float
    grad: np.ndarray
    hard_value: float
    skipped: bool = False


@dataclass
class PairTerms:
    """Primary terms L_ij, pair indicators t_ij and score gaps x_ij = p_j - p_i."""

    primary: np.ndarray
    indicator: np.ndarray
    xij: np.ndarray


def smoothed_step(x, delta: float):
    """Piecewise-linear step: 0 below -delta, 1 above +delta, ramp between."""
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    out = np.clip(np.asarray(x, dtype=np.float64) / (2.0 * delta) + 0.5, 0.0, 1.0)
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def hard_step(x):
    """Heaviside step with the tie convention H(0) = 0.5."""
    x = np.asarray(x, dtype=np.float64)
    out = (x > 0.0).astype(np.float64) + 0.5 * (x == 0.0)
    return float(out) if out.ndim == 0 else out


def _pad_partitions(parts: Sequence[PixelPartition], n: int):
    """Pack ragged positive sets into (B, pmax) index/mask arrays."""
    b = len(parts)
    sizes = np.array([p.num_positives for p in parts], dtype=np.int64)
    if np.any(sizes < 1):
        raise ValueError("spatial losses need at least one positive cell per field")
    pmax = int(sizes.max())
    pos_idx = np.zeros((b, pmax), dtype=np.int64)
    pos_mask = np.zeros((b, pmax), dtype=np.float64)
    pos_lab = np.zeros((b, pmax), dtype=np.float64)
    neg_mask = np.ones((b, n), dtype=np.float64)
    for i, p in enumerate(parts):
        k = p.num_positives
        pos_idx[i, :k] = p.positives
        pos_mask[i, :k] = 1.0
        pos_lab[i, :k] = p.positive_labels
        neg_mask[i, p.positives] = 0.0
    return pos_idx, pos_mask, pos_lab, neg_mask, sizes


def _scatter_add(grad: np.ndarray, pos_idx: np.ndarray, contrib: np.ndarray) -> None:
    # One index per row per column, so column-wise fancy adds accumulate safely;
    # padded columns carry exact zeros.
    rows = np.arange(grad.shape[0])
    for col in range(pos_idx.shape[1]):
        grad[rows, pos_idx[:, col]] += contrib[:, col]


def spatial_rank_many(
    values: np.ndarray,
    parts: Sequence[PixelPartition],
    delta: float,
    max_chunk_cells: int = 4_000_000,
):
    """Spatial Rank loss over a stack of equally-shaped fields.

    ``values`` is (B, n); ``parts`` gives each field's positive set.
    Returns (value, grad, hard_value) with shapes (B,), (B, n), (B,).
    Work is chunked over B to bound the (chunk, pmax, n) temporaries.
    """
    values = np.asarray(values, dtype=np.float64)
    b, n = values.shape
    if len(parts) != b:
        raise ValueError("one partition per field required")
    pos_idx, pos_mask, _, neg_mask, sizes = _pad_partitions(parts, n)
    pmax = pos_idx.shape[1]

    value = np.zeros(b)
    hard = np.zeros(b)
    grad = np.zeros((b, n))
    chunk = max(1, max_chunk_cells // (pmax * n))
    for lo in range(0, b, chunk):
        sl = slice(lo, min(lo + chunk, b))
        v = values[sl]
        m = pos_mask[sl]
        cnt = sizes[sl].astype(np.float64)
        conf_pos = np.take_along_axis(v, pos_idx[sl], axis=1)
        x = v[:, None, :] - conf_pos[:, :, None]

        h = smoothed_step(x, delta)
        den = h.sum(axis=2)  # includes the self pair H(0) = 0.5, so >= 0.5
        primary = h * neg_mask[sl][:, None, :] / den[:, :, None]
        err = primary.sum(axis=2) * m  # l_rank(i) per positive, padding zeroed
        value[sl] = err.sum(axis=1) / cnt

        hh = hard_step(x)
        hden = hh.sum(axis=2)
        hard[sl] = (((hh * neg_mask[sl][:, None, :]).sum(axis=2) / hden) * m).sum(axis=1) / cnt

        g = (primary * m[:, :, None]).sum(axis=1) / cnt[:, None]  # onto negatives
        _scatter_add(g, pos_idx[sl], -err / cnt[:, None])  # onto positives
        grad[sl] = g
    return value, grad, hard


def spatial_rank(pred: HeatmapField, part: PixelPartition, delta: float) -> LossOutput:
    """Rank positive cells above negative cells (per-positive precision error)."""
    value, grad, hard = spatial_rank_many(pred.values[None, :], [part], delta)
    return LossOutput(float(value[0]), grad[0], float(hard[0]))


def _sort_core(scores: np.ndarray, quality: np.ndarray, mask: np.ndarray, delta: float, step_fn):
    """Shared sorting-error arithmetic for Spatial Sort and Instance Sort.

    ``scores`` are confidences, ``quality`` the values to sort by (labels
    or KS), both (B, m) with a validity ``mask``.  Returns per-row values
    and per-entry gradients.
    """
    x = scores[:, None, :] - scores[:, :, None]  # x[b, i, j] = s_j - s_i
    mask2 = mask[:, :, None] * mask[:, None, :]
    h = step_fn(x, delta) if step_fn is smoothed_step else step_fn(x)
    h = h * mask2
    want = 1.0 - quality
    cnt = mask.sum(axis=1)

    rank_all = h.sum(axis=2)
    rank_all_safe = np.where(rank_all > 0.0, rank_all, 1.0)
    cur = (h * want[:, None, :]).sum(axis=2) / rank_all_safe

    higher_q = (quality[:, None, :] >= quality[:, :, None]) * mask2
    hstar = h * higher_q
    den_star = hstar.sum(axis=2)  # self pair keeps this >= 0.5 for valid rows
    den_star_safe = np.where(den_star > 0.0, den_star, 1.0)
    tar = (hstar * want[:, None, :]).sum(axis=2) / den_star_safe

    value = ((cur - tar) * mask).sum(axis=1) / cnt
    primary = (h * want[:, None, :] / rank_all_safe[:, :, None]
               - hstar * want[:, None, :] / den_star_safe[:, :, None])
    grad = (primary.sum(axis=1) - primary.sum(axis=2)) / cnt[:, None]
    return value, grad * mask


def spatial_sort_many(values: np.ndarray, parts: Sequence[PixelPartition], delta: float):
    """Spatial Sort loss over a stack of equally-shaped fields; see spatial_rank_many."""
    values = np.asarray(values, dtype=np.float64)
    b, n = values.shape
    pos_idx, pos_mask, pos_lab, _, _ = _pad_partitions(parts, n)
    conf_pos = np.take_along_axis(values, pos_idx, axis=1)

    value, gpos = _sort_core(conf_pos, pos_lab, pos_mask, delta, smoothed_step)
    hard, _ = _sort_core(conf_pos, pos_lab, pos_mask, delta, hard_step)
    grad = np.zeros((b, n))
    _scatter_add(grad, pos_idx, gpos)
    return value, grad, hard


def spatial_sort(pred: HeatmapField, part: PixelPartition, delta: float) -> LossOutput:
    """Sort positive cells by confidence to match their label ordering."""
    value, grad, hard = spatial_sort_many(pred.values[None, :], [part], delta)
    return LossOutput(float(value[0]), grad[0], float(hard[0]))


def instance_sort_scores(confidences: np.ndarray, ks: np.ndarray, delta: float) -> LossOutput:
    """Instance Sort from raw (confidence, KS) arrays for one keypoint type.

    The gradient has one entry per instance; batches with fewer than two
    instances are skipped (zero loss, ``skipped=True``).
    """
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    ks = np.asarray(ks, dtype=np.float64).reshape(-1)
    if confidences.size != ks.size:
        raise ValueError("confidence/KS length mismatch")
    m = confidences.size
    if m < 2:
        return LossOutput(0.0, np.zeros(m), 0.0, skipped=True)
    if np.any(ks <= 0.0) or np.any(ks > 1.0):
        raise ValueError("KS values must lie in (0, 1]")
    mask = np.ones((1, m))
    value, grad = _sort_core(confidences[None, :], ks[None, :], mask, delta, smoothed_step)
    hard, _ = _sort_core(confidences[None, :], ks[None, :], mask, delta, hard_step)
    return LossOutput(float(value[0]), grad[0], float(hard[0]))


def instance_sort(batch: Sequence[InstanceRecord], delta: float) -> LossOutput:
    """Instance Sort over one keypoint type's records in a batch (Eq. KS-sort).

    Confidences are the per-instance argmax values; sorting targets are the
    records' keypoint-similarity scores.  Cross-type batches are rejected.
    """
    if len(batch) >= 1:
        kinds = {rec.keypoint_id for rec in batch}
        if len(kinds) > 1:
            raise ValueError(f"instance_sort takes a single keypoint type, got ids {sorted(kinds)}")
    conf = np.array([rec.confidence for rec in batch], dtype=np.float64)
    ks = np.array([keypoint_similarity(rec) for rec in batch], dtype=np.float64)
    return instance_sort_scores(conf, ks, delta)


def mse_loss(pred: HeatmapField, label: LabelField) -> LossOutput:
    """Mean squared error over all cells; grad = 2*(pred - label)/num_cells."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    diff = pred.values - label.labels
    n = diff.size
    value = float(diff @ diff) / n
    return LossOutput(value, 2.0 * diff / n, value)


def _axis_kl(logits: np.ndarray, target: np.ndarray, beta: float):
    z = beta * logits
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    tlogt = np.where(target > 0.0, target * np.log(np.where(target > 0.0, target, 1.0)), 0.0)
    n = target.size
    value = float((tlogt - target * logp).sum()) / n
    grad = beta * (np.exp(logp) - target) / n
    return value, grad


def kl_loss(
    pred_logits_x: HeatmapField,
    pred_logits_y: HeatmapField,
    target_x: LabelField,
    target_y: LabelField,
    beta: float = 1.0,
) -> LossOutput:
    """Softmax + KL divergence against normalized 1D bin distributions.

    Each axis contributes its per-bin-averaged KL term (divided by the bin
    count of that axis, not by the sample count).  The gradient is the
    analytic softmax-KL gradient, concatenated as [x bins, y bins].
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    if pred_logits_x.shape.mode is not Mode.ONE_D_X or target_x.shape != pred_logits_x.shape:
        raise ValueError("x inputs must be matching 1D x-axis fields")
    if pred_logits_y.shape.mode is not Mode.ONE_D_Y or target_y.shape != pred_logits_y.shape:
        raise ValueError("y inputs must be matching 1D y-axis fields")
    for name, t in (("x", target_x), ("y", target_y)):
        if abs(t.labels.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} target is not normalized to a distribution "
                             f"(sums to {t.labels.sum():.6g})")
    vx, gx = _axis_kl(pred_logits_x.values, target_x.labels, beta)
    vy, gy = _axis_kl(pred_logits_y.values, target_y.labels, beta)
    value = vx + vy
    return LossOutput(value, np.concatenate([gx, gy]), value)


def total_loss(rank: LossOutput, sort: LossOutput, isort: LossOutput | None,
               cfg: LossConfig) -> LossOutput:
    """Weighted sum of the three ranking losses (instance grads must already
    be mapped onto cells so all gradients share one layout)."""
    parts = [(cfg.rank_coeff, rank), (cfg.sort_coeff, sort)]
    if isort is not None and not isort.skipped:
        parts.append((cfg.isort_coeff, isort))
    shape = parts[0][1].grad.shape
    for _, out in parts[1:]:
        if out.grad.shape != shape:
            raise ValueError("component gradients have incompatible layouts")
    value = sum(c * out.value for c, out in parts)
    hard = sum(c * out.hard_value for c, out in parts)
    grad = sum(c * out.grad for c, out in parts)
    return LossOutput(float(value), grad, float(hard))


def rank_pair_terms(pred: HeatmapField, part: PixelPartition, delta: float) -> PairTerms:
    """Rank primary terms over rows i in P, columns j over every cell;
    the indicator selects the P x N pairs."""
    v = pred.values
    conf_pos = v[part.positives]
    xij = v[None, :] - conf_pos[:, None]
    h = smoothed_step(xij, delta)
    den = h.sum(axis=1, keepdims=True)
    indicator = np.zeros((part.num_positives, v.size), dtype=bool)
    indicator[:, part.negatives] = True
    return PairTerms(h / den * indicator, indicator, xij)


def sort_pair_terms(pred: HeatmapField, part: PixelPartition, delta: float) -> PairTerms:
    """Sort primary terms over the P x P pair set (self pairs included;
    they cancel in the error-driven update)."""
    conf = pred.values[part.positives][None, :]
    lab = part.positive_labels[None, :]
    mask = np.ones_like(conf)
    xij = conf[0][None, :] - conf[0][:, None]
    h = smoothed_step(xij, delta)
    want = 1.0 - lab[0]
    rank_all = h.sum(axis=1, keepdims=True)
    higher = lab[0][None, :] >= lab[0][:, None]
    hstar = h * higher
    den_star = hstar.sum(axis=1, keepdims=True)
    primary = h * want[None, :] / rank_all - hstar * want[None, :] / den_star
    indicator = np.ones_like(h, dtype=bool)
    return PairTerms(primary, indicator, xij)
