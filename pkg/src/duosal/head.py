"""Prediction head and the border-weighted training loss."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


class PredictionHead(nn.Module):
    """Fused finest map -> full-resolution saliency logits (B,1,H,W)."""

    def __init__(self, config, rng):
        self.conv = nn.Conv2d(config.token_dim, 1, 3, rng, padding=1,
                              init_scale=config.init_scale)
        self.out_hw = tuple(config.input_hw)

    def forward(self, fused):
        logits = self.conv(fused)
        return T.bilinear_resize(logits, self.out_hw[0], self.out_hw[1])


def _box_mean(mask, k):
    """Mean of mask over a k x k window at each pixel, windows clipped to
    the image — border positions average over fewer entries, never zeros."""
    B, _, H, W = mask.shape
    r = k // 2
    ii = np.zeros((B, 1, H + 1, W + 1))
    ii[:, :, 1:, 1:] = mask.cumsum(axis=2).cumsum(axis=3)
    y0 = np.clip(np.arange(H) - r, 0, H)
    y1 = np.clip(np.arange(H) + r + 1, 0, H)
    x0 = np.clip(np.arange(W) - r, 0, W)
    x1 = np.clip(np.arange(W) + r + 1, 0, W)
    a = ii[:, :, y1[:, None], x1[None, :]]
    b = ii[:, :, y0[:, None], x1[None, :]]
    c = ii[:, :, y1[:, None], x0[None, :]]
    d = ii[:, :, y0[:, None], x0[None, :]]
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return (a - b - c + d) / counts


def border_weights(gt, k=None):
    """1 + 5 * |local mean - value|: boundary pixels weigh up to 6x."""
    B, _, H, W = gt.shape
    if k is None:
        k = int(round(H / 7.0))
        if k % 2 == 0:
            k += 1
        k = min(max(k, 3), 31)
    return 1.0 + 5.0 * np.abs(_box_mean(gt, k) - gt)


def ppa_loss(logits, gt, k=None):
    """Weighted BCE plus weighted soft-IoU, averaged over the batch.

    gt must be a {0,1} float array shaped like logits; the weights are a
    pure function of gt and carry no gradient.
    """
    if not isinstance(gt, np.ndarray):
        gt = np.asarray(gt)
    if logits.shape != gt.shape or logits.ndim != 4 or logits.shape[1] != 1:
        raise ShapeError(f"need matching (B,1,H,W), got {logits.shape} vs {gt.shape}")
    uniq = np.unique(gt)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise ValueError(f"ground truth must be exactly 0/1, found values {uniq[:8]}")

    w = Tensor(border_weights(gt, k).astype(logits.dtype.type))
    g = Tensor(gt.astype(logits.dtype.type))

    bce = g * T.softplus(-logits) + (1.0 - g) * T.softplus(logits)
    w_sum = T.tsum(w, axes=(1, 2, 3))
    wbce = T.tsum(w * bce, axes=(1, 2, 3)) / w_sum

    p = T.sigmoid(logits)
    inter = T.tsum(w * p * g, axes=(1, 2, 3))
    union = T.tsum(w * (p + g - p * g), axes=(1, 2, 3))
    wiou = 1.0 - (inter + 1.0) / (union + 1.0)

    return T.tmean(wbce + wiou)
