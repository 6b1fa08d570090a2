"""Segmentation, correspondence and classification metrics on patch grids.

Conventions:
  * IoU of two empty masks is 1.0 (nothing to find, nothing predicted).
  * Boundary patches are mask patches with a 4-neighbour outside the mask;
    cells beyond the grid edge count as outside.
  * Boundary matching tolerance is Euclidean distance <= 1 patch.
  * F1 on the positive class is 0.0 when there are no true positives.
"""

from __future__ import annotations

import numpy as np


def iou(pred, gt) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def otsu_threshold(scores) -> float:
    """Threshold maximising between-class variance over all splits of the sorted scores.

    Foreground is ``scores > threshold``. When every score is equal there is no
    split; the threshold is ``-inf`` so everything is foreground.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    u = np.unique(s)
    if u.size < 2:
        return -np.inf
    counts = np.array([(s == v).sum() for v in u], dtype=np.float64)
    sums = counts * u
    n = counts.sum()
    total = sums.sum()
    c0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    c1 = n - c0
    mu0 = s0 / c0
    mu1 = (total - s0) / c1
    between = c0 * c1 * (mu0 - mu1) ** 2
    best = int(np.argmax(between))
    return float((u[best] + u[best + 1]) / 2.0)


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~inner


def _dilate_cross(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1, constant_values=False)
    return p[1:-1, 1:-1] | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]


def boundary_f(pred, gt) -> float:
    """Boundary F-measure with a one-patch tolerance."""
    bp = boundary(pred)
    bg = boundary(gt)
    n_p, n_g = bp.sum(), bg.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = (bp & _dilate_cross(bg)).sum() / n_p
    recall = (bg & _dilate_cross(bp)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def pck(pred_points, true_points, height: int, width: int, alpha: float = 0.1) -> float:
    """Fraction of predictions within ``alpha * max(H, W)`` patches (inclusive)."""
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(true_points, dtype=np.float64).reshape(-1, 2)
    if len(true) == 0:
        return 1.0
    thr = alpha * max(height, width)
    d = np.hypot(*(pred - true).T)
    return float(np.mean(d <= thr + 1e-12))


def binary_f1(pred, gold) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gold, dtype=bool)
    tp = int((p & g).sum())
    if tp == 0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / g.sum()
    return float(2 * precision * recall / (precision + recall))


def accuracy(pred, gold) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gold, dtype=bool)
    return float(np.mean(p == g))
