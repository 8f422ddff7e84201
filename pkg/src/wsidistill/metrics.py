"""Classification and nuclei instance-segmentation metrics.

Instance maps are 2-D integer arrays: 0 is background, each positive value
one instance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """2|X & Y| / (|X| + |Y|) of two binary masks; 1.0 when both are empty."""
    x, y = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
    _check_shapes(x, y)
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / denom


def _overlaps(gt: np.ndarray, pred: np.ndarray):
    """Instance ids, areas and the pairwise intersection matrix."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_shapes(gt, pred)
    g_ids = np.unique(gt[gt > 0])
    p_ids = np.unique(pred[pred > 0])
    g_idx = np.searchsorted(g_ids, gt.ravel())
    p_idx = np.searchsorted(p_ids, pred.ravel())
    both = (gt.ravel() > 0) & (pred.ravel() > 0)
    inter = np.zeros((len(g_ids), len(p_ids)), dtype=np.int64)
    np.add.at(inter, (g_idx[both], p_idx[both]), 1)
    g_area = np.array([np.count_nonzero(gt == i) for i in g_ids], dtype=np.int64)
    p_area = np.array([np.count_nonzero(pred == i) for i in p_ids], dtype=np.int64)
    return g_ids, p_ids, g_area, p_area, inter


def aji_components(gt: np.ndarray, pred: np.ndarray) -> tuple[int, int]:
    """Aggregated intersection and union of the AJI matching.

    GT instances are visited in ascending id order; each takes the unused
    predicted instance of highest IoU (lowest id on ties), provided the
    overlap is non-empty. Unmatched GT areas and never-used predictions are
    added to the aggregated union.
    """
    g_ids, p_ids, g_area, p_area, inter = _overlaps(gt, pred)
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    used = np.zeros(len(p_ids), dtype=bool)
    agg_i = agg_u = 0
    for g in range(len(g_ids)):
        cand = np.where(used, -1.0, iou[g])
        j = int(np.argmax(cand)) if len(cand) else -1
        if j >= 0 and cand[j] > 0:
            used[j] = True
            agg_i += int(inter[g, j])
            agg_u += int(union[g, j])
        else:
            agg_u += int(g_area[g])
    agg_u += int(p_area[~used].sum())
    return agg_i, agg_u


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard index; 1.0 when both maps are empty."""
    agg_i, agg_u = aji_components(gt, pred)
    return agg_i / agg_u if agg_u else 1.0


@dataclass
class PanopticBreakdown:
    dq: float
    sq: float
    pq: float
    tp_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    fp_ids: list[int] = field(default_factory=list)
    fn_ids: list[int] = field(default_factory=list)


def panoptic(gt: np.ndarray, pred: np.ndarray, threshold: float = 0.5) -> PanopticBreakdown:
    """Detection, segmentation and panoptic quality with IoU > ``threshold`` matching."""
    g_ids, p_ids, g_area, p_area, inter = _overlaps(gt, pred)
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    gi, pj = np.nonzero(iou > threshold)
    tp = [(int(g_ids[g]), int(p_ids[p]), float(iou[g, p])) for g, p in zip(gi, pj)]
    fn = sorted(set(g_ids.tolist()) - {t[0] for t in tp})
    fp = sorted(set(p_ids.tolist()) - {t[1] for t in tp})
    denom = len(tp) + 0.5 * len(fp) + 0.5 * len(fn)
    dq = len(tp) / denom if denom else 0.0
    sq = sum(t[2] for t in tp) / len(tp) if tp else 0.0
    return PanopticBreakdown(dq, sq, dq * sq, tp, fp, fn)


def segmentation_scores(gt: np.ndarray, pred: np.ndarray) -> dict[str, float]:
    pb = panoptic(gt, pred)
    return {"dice": dice(np.asarray(gt) > 0, np.asarray(pred) > 0), "aji": aji(gt, pred),
            "dq": pb.dq, "sq": pb.sq, "pq": pb.pq}


# --------------------------------------------------------------------------
# classification


def accuracy(pred_labels, true_labels) -> float:
    p, t = np.asarray(pred_labels), np.asarray(true_labels)
    if p.size == 0:
        raise MetricError("accuracy of an empty prediction set")
    _check_shapes(p, t)
    return float(np.mean(p == t))


def _binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)  # midranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney ROC-AUC; a (n, C) score matrix with C > 2 gives the macro one-vs-rest mean."""
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if s.ndim == 2 and s.shape[1] == 2:
        s = s[:, 1]
    if s.ndim == 1:
        classes = np.unique(y)
        if len(classes) < 2:
            raise MetricError("AUC is undefined when only one class is present")
        if len(classes) > 2:
            raise MetricError("binary scores given for a multiclass problem")
        return _binary_auc(s, (y == classes[-1]).astype(int) if set(classes) != {0, 1} else y)
    if len(s) != len(y):
        raise MetricError("scores and labels differ in length")
    aucs = [_binary_auc(s[:, c], (y == c).astype(int)) for c in range(s.shape[1]) if np.any(y == c)]
    if not aucs:
        raise MetricError("no class has positive examples")
    return float(np.mean(aucs))
