"""Pixel- and component-level anomaly detection metrics.

Anomalous (OOD) pixels are the positive class throughout.  Pixel metrics
are rank statistics over a descending-score threshold sweep with tied
scores processed atomically; component metrics label 8-connected regions
and score them per threshold over a grid.  Ignore pixels (label 255) are
excluded from every count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError, ValidationError
from .tensor_io import IGNORE_LABEL, OOD_LABEL

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

TP_SIOU_CUTOFF = 0.5
FP_PPV_CUTOFF = 0.5
DEFAULT_GRID_SIZE = 40


@dataclass(frozen=True)
class ScoredPixels:
    """Flat pixel scores with OOD/ID ground truth, ignore pixels already
    removed.  Higher score = more anomalous."""

    scores: np.ndarray
    is_ood: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.is_ood.shape or self.scores.ndim != 1:
            raise ValidationError(
                f"scores {self.scores.shape} and labels {self.is_ood.shape} must be equal-length vectors"
            )


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    ood_recall: float
    id_retention: float


@dataclass(frozen=True)
class MetricsReport:
    ap: float
    fpr_at_95tpr: float
    siou_gt: float
    ppv: float
    mean_f1: float
    curve: tuple[CurvePoint, ...]

    def to_json_dict(self) -> dict:
        return {
            "ap": self.ap,
            "fpr_at_95tpr": self.fpr_at_95tpr,
            "siou_gt": self.siou_gt,
            "ppv": self.ppv,
            "mean_f1": self.mean_f1,
            "curve": [[p.ood_recall, p.id_retention] for p in self.curve],
        }


def scored_pixels(u: np.ndarray, labels: np.ndarray) -> ScoredPixels:
    """Flatten an uncertainty map and label map into scored pixels,
    dropping ignore pixels."""
    u = np.asarray(u)
    labels = np.asarray(labels)
    if u.shape != labels.shape:
        raise ValidationError(f"score map {u.shape} does not match label map {labels.shape}")
    keep = labels != IGNORE_LABEL
    return ScoredPixels(
        scores=u[keep].astype(np.float64).ravel(),
        is_ood=(labels[keep] == OOD_LABEL).ravel(),
    )


def pool_scored_pixels(parts: Sequence[ScoredPixels]) -> ScoredPixels:
    if not parts:
        raise ValidationError("no scored pixels to pool")
    return ScoredPixels(
        scores=np.concatenate([p.scores for p in parts]),
        is_ood=np.concatenate([p.is_ood for p in parts]),
    )


def _sweep_counts(p: ScoredPixels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative TP/FP after each distinct threshold of a descending
    sweep.  Returns (thresholds desc, tp, fp)."""
    order = np.argsort(-p.scores, kind="stable")
    s = p.scores[order]
    y = p.is_ood[order]
    # last position of each tied block
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(y.astype(np.int64))[last]
    fp = np.cumsum((~y).astype(np.int64))[last]
    return s[last], tp, fp


def _require_both_classes(p: ScoredPixels, metric: str) -> tuple[int, int]:
    pos = int(p.is_ood.sum())
    neg = int(p.is_ood.size - pos)
    if pos == 0:
        raise UndefinedMetricError(f"{metric} undefined: no OOD (positive) pixels")
    if neg == 0:
        raise UndefinedMetricError(f"{metric} undefined: no ID (negative) pixels")
    return pos, neg


def pixel_ap(p: ScoredPixels) -> float:
    """Average precision of the descending-score sweep with tied scores
    processed atomically: AP = sum over distinct thresholds of
    (R_k - R_{k-1}) * P_k."""
    pos, _ = _require_both_classes(p, "average precision")
    _, tp, fp = _sweep_counts(p)
    recall = tp / pos
    precision = tp / (tp + fp)
    # fsum gives the correctly-rounded total, independent of term order
    return math.fsum(np.diff(recall, prepend=0.0) * precision)


def pr_curve(p: ScoredPixels) -> list[tuple[float, float]]:
    """(recall, precision) at each distinct threshold, descending."""
    pos, _ = _require_both_classes(p, "precision-recall curve")
    _, tp, fp = _sweep_counts(p)
    return [(float(t / pos), float(t / (t + f))) for t, f in zip(tp, fp)]


def fpr_at_tpr(p: ScoredPixels, target_tpr: float = 0.95) -> float:
    """False positive rate at the largest threshold whose TPR reaches the
    target.  Thresholds are the distinct scores; no interpolation."""
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError(f"target_tpr must lie in (0, 1], got {target_tpr!r}")
    pos, neg = _require_both_classes(p, "FPR at target TPR")
    _, tp, fp = _sweep_counts(p)
    hit = np.nonzero(tp / pos >= target_tpr)[0]
    # the sweep always ends at TPR == 1, so a hit exists
    first = int(hit[0])
    return float(fp[first] / neg)


def retention_curve(ood: ScoredPixels, id_scores: np.ndarray) -> list[CurvePoint]:
    """Trade-off between OOD recall and ID retention.

    For every distinct threshold of the OOD dataset's sweep (plus sentinel
    endpoints beyond the score range), recall is the fraction of OOD pixels
    scoring at or above the threshold and retention the fraction of the
    ID-only scores strictly below it.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    if ood.scores.size == 0 or id_scores.size == 0:
        raise UndefinedMetricError("retention curve undefined on empty inputs")
    if not ood.is_ood.any():
        raise UndefinedMetricError("retention curve undefined: no OOD pixels")
    thresholds = np.unique(ood.scores)[::-1]
    thresholds = np.concatenate(([np.inf], thresholds, [-np.inf]))
    ood_sorted = np.sort(ood.scores[ood.is_ood])
    id_sorted = np.sort(id_scores)
    n_ood = ood_sorted.size
    n_id = id_sorted.size
    points = []
    for tau in thresholds:
        recall = (n_ood - np.searchsorted(ood_sorted, tau, side="left")) / n_ood
        retention = np.searchsorted(id_sorted, tau, side="left") / n_id
        points.append(CurvePoint(float(tau), float(recall), float(retention)))
    return points


def _component_sets(mask: np.ndarray) -> list[np.ndarray]:
    lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return [lab == i for i in range(1, n + 1)]


def component_metrics(
    u: np.ndarray,
    gt: np.ndarray,
    grid: Iterable[float],
) -> tuple[float, float, float]:
    """Segment-level quality of thresholded predictions against 8-connected
    ground-truth OOD components, averaged over the threshold grid.

    Per threshold: each ground-truth component k scores an adjusted IoU
    |k n P| / |k u (P \\ A_k)| where A_k is the union of the other GT
    components, so prediction mass on a neighboring component is not
    penalized.  Each predicted component scores PPV against the union of
    all GT OOD pixels; no predicted components counts as PPV 0.  A GT
    component is a true positive when its adjusted IoU exceeds 0.5, a
    predicted component a false positive when its PPV is at most 0.5, and
    F1 = 2TP / (2TP + FN + FP).
    """
    u = np.asarray(u)
    gt = np.asarray(gt)
    if u.shape != gt.shape or u.ndim != 2:
        raise ValidationError(f"score map {u.shape} does not match label map {gt.shape}")
    grid = [float(t) for t in grid]
    if not grid:
        raise ValidationError("component metrics need a non-empty threshold grid")
    valid = gt != IGNORE_LABEL
    gt_ood = (gt == OOD_LABEL) & valid
    gt_comps = _component_sets(gt_ood)
    if not gt_comps:
        raise UndefinedMetricError("component metrics undefined: no ground-truth OOD component")

    siou_per_tau = []
    ppv_per_tau = []
    f1_per_tau = []
    for tau in grid:
        pred = (u >= tau) & valid
        sious = []
        for comp in gt_comps:
            others = gt_ood & ~comp
            inter = int(np.count_nonzero(pred & comp))
            union = int(np.count_nonzero(comp | (pred & ~others)))
            sious.append(inter / union)
        pred_comps = _component_sets(pred)
        ppvs = [
            int(np.count_nonzero(comp & gt_ood)) / int(np.count_nonzero(comp))
            for comp in pred_comps
        ]
        tp = sum(1 for s in sious if s > TP_SIOU_CUTOFF)
        fn = len(sious) - tp
        fp = sum(1 for v in ppvs if v <= FP_PPV_CUTOFF)
        siou_per_tau.append(float(np.mean(sious)))
        ppv_per_tau.append(float(np.mean(ppvs)) if ppvs else 0.0)
        f1_per_tau.append(2 * tp / (2 * tp + fn + fp))
    return (
        float(np.mean(siou_per_tau)),
        float(np.mean(ppv_per_tau)),
        float(np.mean(f1_per_tau)),
    )


def default_grid(u: np.ndarray, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """Uniform thresholds spanning the score range of one map."""
    if size < 1:
        raise ValidationError(f"grid size must be >= 1, got {size}")
    u = np.asarray(u, dtype=np.float64)
    return np.linspace(float(u.min()), float(u.max()), size)


def evaluate(
    maps: Sequence[tuple[np.ndarray, np.ndarray]],
    grid_size: int = DEFAULT_GRID_SIZE,
) -> MetricsReport:
    """Score a set of (uncertainty map, label map) pairs.

    Pixel metrics pool every image's pixels; component metrics are computed
    per image on a per-image grid and averaged over the images that contain
    at least one OOD component.
    """
    if not maps:
        raise ValidationError("evaluate needs at least one (scores, labels) pair")
    pooled = pool_scored_pixels([scored_pixels(u, gt) for u, gt in maps])

    component_rows = []
    for u, gt in maps:
        gt = np.asarray(gt)
        gt_ood = (gt == OOD_LABEL) & (gt != IGNORE_LABEL)
        if not gt_ood.any():
            continue
        component_rows.append(component_metrics(u, gt, default_grid(u, grid_size)))
    if not component_rows:
        raise UndefinedMetricError("no image contains a ground-truth OOD component")
    siou, ppv, f1 = (float(np.mean([row[i] for row in component_rows])) for i in range(3))

    curve = retention_curve(pooled, pooled.scores[~pooled.is_ood])
    return MetricsReport(
        ap=pixel_ap(pooled),
        fpr_at_95tpr=fpr_at_tpr(pooled, 0.95),
        siou_gt=siou,
        ppv=ppv,
        mean_f1=f1,
        curve=tuple(curve),
    )
