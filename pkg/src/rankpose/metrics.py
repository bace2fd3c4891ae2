"""Localization-quality and confidence-alignment metrics.

Keypoint similarity KS = exp(-d^2 / (2 s^2 k^2)) scores one keypoint's
localization given distance d, instance area s and per-type fall-off k.
OKS is the mean KS over an instance's visible keypoints; mAP thresholds
OKS over a confidence-ranked instance list.  Spearman rank correlation
measures confidence/quality alignment directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "InstanceRecord",
    "KeypointCatalog",
    "EvalResult",
    "Reference",
    "CovarianceReport",
    "keypoint_similarity",
    "oks",
    "mean_ap",
    "default_thresholds",
    "pck",
    "spearman",
    "rankdata",
    "minmax_scale",
    "covariance_identity_check",
    "independent_quality_confidence",
    "monotonicity_trial",
    "evaluate_instances",
]

# COCO keypoint names and fall-off constants.
_COCO_KEYPOINTS = [
    ("nose", 0.026), ("left_eye", 0.025), ("right_eye", 0.025),
    ("left_ear", 0.035), ("right_ear", 0.035),
    ("left_shoulder", 0.079), ("right_shoulder", 0.079),
    ("left_elbow", 0.072), ("right_elbow", 0.072),
    ("left_wrist", 0.062), ("right_wrist", 0.062),
    ("left_hip", 0.107), ("right_hip", 0.107),
    ("left_knee", 0.087), ("right_knee", 0.087),
    ("left_ankle", 0.089), ("right_ankle", 0.089),
]


@dataclass
class InstanceRecord:
    """One person instance's prediction for one keypoint type.

    ``confidence`` is the argmax cell value; coordinates are (row, col) in
    field units.  ``bbox_diag`` / ``head_size`` are optional reference
    lengths for PCK.
    """

    instance_id: int
    keypoint_id: int
    confidence: float
    pred_coord: tuple[float, float]
    gt_coord: tuple[float, float]
    area: float
    falloff: float
    visible: bool = True
    bbox_diag: float | None = None
    head_size: float | None = None

    def __post_init__(self) -> None:
        if self.area <= 0.0:
            raise ValueError(f"instance area must be positive, got {self.area}")
        if self.falloff <= 0.0:
            raise ValueError(f"keypoint falloff must be positive, got {self.falloff}")

    @property
    def distance(self) -> float:
        return math.dist(self.pred_coord, self.gt_coord)


@dataclass(frozen=True)
class KeypointCatalog:
    """Keypoint names and per-type fall-off constants."""

    names: tuple[str, ...]
    falloffs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.falloffs):
            raise ValueError("names/falloffs length mismatch")
        if any(k <= 0.0 for k in self.falloffs):
            raise ValueError("every falloff must be positive")

    def __len__(self) -> int:
        return len(self.names)

    def falloff_for(self, keypoint_id: int) -> float:
        return self.falloffs[keypoint_id]

    @classmethod
    def coco(cls) -> "KeypointCatalog":
        names, falloffs = zip(*_COCO_KEYPOINTS)
        return cls(names, falloffs)

    @classmethod
    def uniform(cls, num_keypoints: int, falloff: float) -> "KeypointCatalog":
        names = tuple(f"kp_{i}" for i in range(num_keypoints))
        return cls(names, (falloff,) * num_keypoints)


@dataclass
class EvalResult:
    ap_per_threshold: np.ndarray
    map: float
    ar: float
    pck: float | None = None
    spearman: float | None = None

    def to_dict(self) -> dict:
        return {
            "ap_per_threshold": [float(v) for v in self.ap_per_threshold],
            "map": float(self.map),
            "ar": float(self.ar),
            "pck": None if self.pck is None else float(self.pck),
            "spearman": None if self.spearman is None else float(self.spearman),
        }


class Reference(enum.Enum):
    BBOX_DIAG = "bbox_diag"
    HEAD_SIZE = "head_size"


def keypoint_similarity(rec: InstanceRecord) -> float:
    """KS = exp(-d^2 / (2 s^2 k^2)) in (0, 1]."""
    d2 = (rec.pred_coord[0] - rec.gt_coord[0]) ** 2 + (rec.pred_coord[1] - rec.gt_coord[1]) ** 2
    return math.exp(-d2 / (2.0 * rec.area**2 * rec.falloff**2))


def oks(records: Sequence[InstanceRecord]) -> float:
    """Mean KS over one instance's visible keypoints."""
    ids = {rec.instance_id for rec in records}
    if len(ids) > 1:
        raise ValueError(f"oks takes one instance's records, got ids {sorted(ids)}")
    visible = [rec for rec in records if rec.visible]
    if not visible:
        raise ValueError("oks undefined: no visible keypoints")
    return sum(keypoint_similarity(rec) for rec in visible) / len(visible)


def default_thresholds() -> np.ndarray:
    """The COCO ladder 0.50:0.05:0.95."""
    return np.linspace(0.5, 0.95, 10)


def _average_precision(tp_ranked: np.ndarray) -> float:
    """All-point-interpolated AP for a confidence-ranked TP/FP sequence."""
    n = tp_ranked.size
    hits = np.flatnonzero(tp_ranked)
    if hits.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp_ranked)
    precision = cum_tp / np.arange(1, n + 1)
    recall = cum_tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(recall[hits], prepend=0.0)
    return float(steps @ envelope[hits])


def mean_ap(scored: Sequence[tuple[float, float]] | np.ndarray,
            thresholds: np.ndarray | None = None) -> EvalResult:
    """COCO-style AP/AR over OKS thresholds.

    ``scored`` holds one (confidence, oks) pair per instance.  Instances
    are ranked by confidence (descending, stable); at threshold t an
    instance counts as a true positive iff its OKS >= t.  AR at t is the
    final recall of the ranked list.
    """
    scored = np.asarray(scored, dtype=np.float64)
    if scored.ndim != 2 or scored.shape[1] != 2 or scored.shape[0] == 0:
        raise ValueError("scored must be a non-empty sequence of (confidence, oks) pairs")
    if thresholds is None:
        thresholds = default_thresholds()
    order = np.argsort(-scored[:, 0], kind="stable")
    oks_ranked = scored[order, 1]
    aps = np.array([_average_precision(oks_ranked >= t) for t in thresholds])
    ars = np.array([(oks_ranked >= t).mean() for t in thresholds])
    return EvalResult(aps, float(aps.mean()), float(ars.mean()))


def pck(instances: Sequence[InstanceRecord], alpha: float,
        reference: Reference = Reference.BBOX_DIAG) -> float:
    """Fraction of visible keypoints with distance <= alpha * reference length."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    hits = total = 0
    for rec in instances:
        if not rec.visible:
            continue
        ref = rec.bbox_diag if reference is Reference.BBOX_DIAG else rec.head_size
        if ref is None:
            raise ValueError(f"record {rec.instance_id}/{rec.keypoint_id} lacks a "
                             f"{reference.value} reference length")
        total += 1
        if rec.distance <= alpha * ref:
            hits += 1
    if total == 0:
        raise ValueError("pck undefined: no visible keypoints")
    return hits / total


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based fractional ranks; ties get the average of their rank span."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties), in [-1, 1]."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError("length mismatch")
    if a.size < 2:
        raise ValueError("spearman needs at least two samples")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise ValueError("spearman undefined: zero rank variance")
    return float(ra @ rb) / denom


def minmax_scale(confidences: Sequence[float], lo: float, hi: float) -> np.ndarray:
    """(c - lo) / (hi - lo), clamped to [0, 1]; a monotone map, so it never
    changes confidence orderings (and hence mAP or Spearman)."""
    if not hi > lo:
        raise ValueError(f"degenerate calibration: max {hi} must exceed min {lo}")
    c = np.asarray(confidences, dtype=np.float64)
    return np.clip((c - lo) / (hi - lo), 0.0, 1.0)


def _pop_cov(u: np.ndarray, v: np.ndarray) -> float:
    return float((u - u.mean()) @ (v - v.mean())) / u.size


@dataclass
class CovarianceReport:
    cov_oks_conf: float
    double_sum_scaled: float
    diag_sum_scaled: float
    abs_discrepancy: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def covariance_identity_check(L: np.ndarray, C: np.ndarray) -> CovarianceReport:
    """Check Cov(OKS, Conf) = (1/K^2) * sum_jm Cov(L_j, C_m) on K x n matrices.

    The double-sum identity is exact algebra (no independence assumption);
    the diagonal-only sum matches it when cross covariances vanish.
    """
    L = np.asarray(L, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if L.shape != C.shape or L.ndim != 2:
        raise ValueError("L and C must be K x n matrices of equal shape")
    k, n = L.shape
    if n < 2:
        raise ValueError("covariance undefined for fewer than two instances")
    lhs = _pop_cov(L.mean(axis=0), C.mean(axis=0))
    cross = np.array([[_pop_cov(L[j], C[m]) for m in range(k)] for j in range(k)])
    rhs = float(cross.sum()) / k**2
    diag = float(np.trace(cross)) / k**2
    return CovarianceReport(lhs, rhs, diag, abs(lhs - rhs))


def independent_quality_confidence(rng: np.random.Generator, k: int, n: int):
    """Quality/confidence matrices with (numerically) zero cross covariances.

    Each keypoint's quality and confidence rows are scalar multiples of one
    column of an orthonormal centered basis, so Cov(L_j, C_m) = 0 for j != m
    and the diagonal covariances are a_j * b_j / n.
    """
    if n < k + 1:
        raise ValueError("need n >= k + 1 instances for a centered orthogonal basis")
    raw = rng.standard_normal((n, k))
    raw -= raw.mean(axis=0)
    q, _ = np.linalg.qr(raw)
    a = rng.uniform(0.5, 2.0, size=k)
    b = rng.uniform(0.5, 2.0, size=k)
    L = (q * a).T
    C = (q * b).T
    return L, C, a * b / n


def monotonicity_trial(rng: np.random.Generator, k: int, n: int, factor: float = 2.0):
    """Raise one per-keypoint covariance under the independence construction;
    returns (base, boosted) Cov(OKS, Conf)."""
    if factor <= 1.0:
        raise ValueError("factor must exceed 1")
    L, C, _ = independent_quality_confidence(rng, k, n)
    base = covariance_identity_check(L, C).cov_oks_conf
    j = int(rng.integers(k))
    C2 = C.copy()
    C2[j] *= factor
    boosted = covariance_identity_check(L, C2).cov_oks_conf
    return base, boosted


def evaluate_instances(records: Sequence[InstanceRecord],
                       thresholds: np.ndarray | None = None,
                       alpha: float = 0.2,
                       reference: Reference = Reference.BBOX_DIAG,
                       with_pck: bool = True) -> EvalResult:
    """Full metric stack over per-keypoint records grouped by instance.

    Instance confidence is the mean argmax confidence over visible
    keypoints; instance quality is OKS.  Spearman correlates the two.
    """
    by_instance: dict[int, list[InstanceRecord]] = {}
    for rec in records:
        by_instance.setdefault(rec.instance_id, []).append(rec)
    if not by_instance:
        raise ValueError("no records to evaluate")
    scored = []
    for iid in sorted(by_instance):
        recs = [r for r in by_instance[iid] if r.visible]
        if not recs:
            continue
        conf = sum(r.confidence for r in recs) / len(recs)
        scored.append((conf, oks(recs)))
    result = mean_ap(np.array(scored), thresholds)
    if with_pck:
        result.pck = pck(records, alpha, reference)
    if len(scored) >= 2:
        arr = np.array(scored)
        try:
            result.spearman = spearman(arr[:, 0], arr[:, 1])
        except ValueError:
            result.spearman = None
    return result
