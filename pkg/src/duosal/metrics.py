"""Saliency evaluation: MAE, adaptive F, structure score, alignment score,
and 256-point PR curves. Plain numpy on (H, W) arrays; predictions live
in [0, 1], ground truth is boolean (or exactly {0, 1}).

Conventions pinned here and mirrored by the verification oracles:
  - adaptive threshold  min(2 * mean(pred), 1), binarize with >=
  - PR curves binarize with strict > at i/255, i = 0..255
  - sample std uses ddof=1, defined as 0 for fewer than 2 elements
  - structure/alignment special cases (empty or full gt) short-circuit
  - all dataset scores are unweighted means of per-image scores
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(np.float64).eps


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"need matching 2-D arrays, got {pred.shape} vs {gt.shape}")
    if pred.min() < -1e-9 or pred.max() > 1 + 1e-9:
        raise ValueError("prediction values must lie in [0, 1]")
    return np.clip(pred, 0.0, 1.0), gt > 0.5


def normalize_prediction(pred):
    """Min-max rescale to [0, 1]; flat inputs collapse to zero."""
    pred = np.asarray(pred, dtype=np.float64)
    lo = pred.min()
    return (pred - lo) / max(pred.max() - lo, 1e-8)


def mae(pred, gt):
    pred, gtb = _check_pair(pred, gt)
    return float(np.abs(pred - gtb).mean())


def _adaptive_threshold(pred):
    return min(2.0 * float(pred.mean()), 1.0)


def adaptive_fmeasure(pred, gt, beta2=0.3):
    pred, gtb = _check_pair(pred, gt)
    binary = pred >= _adaptive_threshold(pred)
    inter = float(np.count_nonzero(binary & gtb))
    if inter == 0:
        return 0.0
    precision = inter / np.count_nonzero(binary)
    recall = inter / np.count_nonzero(gtb)
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def _std1(x):
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _object_score(values):
    m = float(values.mean()) if values.size else 0.0
    return 2.0 * m / (m * m + 1.0 + _std1(values) + _EPS)


def _ssim_like(x, y):
    n = x.size
    xm, ym = float(x.mean()), float(y.mean())
    if n > 1:
        sx = float(((x - xm) ** 2).sum()) / (n - 1)
        sy = float(((y - ym) ** 2).sum()) / (n - 1)
        sxy = float(((x - xm) * (y - ym)).sum()) / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * xm * ym * sxy
    b = (xm * xm + ym * ym) * (sx + sy)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def smeasure(pred, gt, alpha=0.5):
    """Structure score: object-level and centroid-quadrant region terms."""
    pred, gtb = _check_pair(pred, gt)
    y = float(gtb.mean())
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())

    fg = _object_score(pred[gtb])
    bg = _object_score((1.0 - pred)[~gtb])
    s_object = y * fg + (1.0 - y) * bg

    ys, xs = np.nonzero(gtb)
    cy = int(np.round(ys.mean()))
    cx = int(np.round(xs.mean()))
    gtf = gtb.astype(np.float64)
    total = gtb.size
    s_region = 0.0
    for rows, cols in (
        (slice(0, cy + 1), slice(0, cx + 1)),
        (slice(0, cy + 1), slice(cx + 1, None)),
        (slice(cy + 1, None), slice(0, cx + 1)),
        (slice(cy + 1, None), slice(cx + 1, None)),
    ):
        pq = pred[rows, cols]
        gq = gtf[rows, cols]
        if pq.size == 0:
            continue
        s_region += (pq.size / total) * _ssim_like(pq, gq)

    return float(max(0.0, alpha * s_object + (1.0 - alpha) * s_region))


def emeasure(pred, gt):
    """Adaptive alignment score (binarized at the adaptive threshold)."""
    pred, gtb = _check_pair(pred, gt)
    binary = (pred >= _adaptive_threshold(pred)).astype(np.float64)
    n_fg = np.count_nonzero(gtb)
    if n_fg == 0:
        return float((1.0 - binary).mean())
    if n_fg == gtb.size:
        return float(binary.mean())
    gtf = gtb.astype(np.float64)
    fm = binary - binary.mean()
    gm = gtf - gtf.mean()
    align = 2.0 * gm * fm / (gm * gm + fm * fm + _EPS)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def pr_curve(pred, gt, n_thresholds=256):
    """Precision/recall at thresholds i/(n-1)... i/255 by default.

    Binarization is strict >. Empty prediction sets get precision 1,
    empty ground truth gets recall 0.
    """
    pred, gtb = _check_pair(pred, gt)
    n_gt = np.count_nonzero(gtb)
    precision = np.empty(n_thresholds)
    recall = np.empty(n_thresholds)
    for i in range(n_thresholds):
        binary = pred > (i / (n_thresholds - 1))
        tp = np.count_nonzero(binary & gtb)
        n_pos = np.count_nonzero(binary)
        precision[i] = tp / n_pos if n_pos else 1.0
        recall[i] = tp / n_gt if n_gt else 0.0
    return precision, recall


class MetricAccumulator:
    """Streams (pred, gt) pairs; reports unweighted per-image means.

    Predictions are min-max normalized before scoring, matching the
    usual saliency benchmark protocol.
    """

    def __init__(self, with_pr=False):
        self._mae = []
        self._fm = []
        self._sm = []
        self._em = []
        self._pr = [] if with_pr else None

    def update(self, pred, gt):
        pred = normalize_prediction(pred)
        self._mae.append(mae(pred, gt))
        self._fm.append(adaptive_fmeasure(pred, gt))
        self._sm.append(smeasure(pred, gt))
        self._em.append(emeasure(pred, gt))
        if self._pr is not None:
            self._pr.append(pr_curve(pred, gt))

    def __len__(self):
        return len(self._mae)

    def results(self):
        if not self._mae:
            raise ValueError("no samples accumulated")
        out = {
            "mae": float(np.mean(self._mae)),
            "fmeasure": float(np.mean(self._fm)),
            "smeasure": float(np.mean(self._sm)),
            "emeasure": float(np.mean(self._em)),
        }
        if self._pr is not None:
            out["precision"] = np.mean([p for p, _ in self._pr], axis=0)
            out["recall"] = np.mean([r for _, r in self._pr], axis=0)
        return out


def evaluate_batch(probs, gts, with_pr=False):
    """probs/gts are (B,1,H,W); returns the accumulated result dict."""
    probs = np.asarray(probs)
    gts = np.asarray(gts)
    if probs.shape != gts.shape or probs.ndim != 4:
        raise ValueError(f"need matching (B,1,H,W), got {probs.shape} vs {gts.shape}")
    acc = MetricAccumulator(with_pr=with_pr)
    for i in range(probs.shape[0]):
        acc.update(probs[i, 0], gts[i, 0])
    return acc.results()
