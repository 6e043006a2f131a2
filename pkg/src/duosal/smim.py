"""Gated injection of the supplementary stream into a trunk branch.

Two learned scalars per sample decide how much each modality matters
(shared conv over the stacked pair, per-pixel sigmoid, global average),
then the supplementary map passes through a coordinate-attention gate
before the weighted sum. With a zero supplementary map the gate input is
zero and the whole gated term vanishes exactly.
"""

from __future__ import annotations

from . import nn
from . import tensor as T
from .tensor import ShapeError


class CoordinateAttention(nn.Module):
    """Long-range gate from pooled row/column profiles.

    Mean-pools the map along each spatial axis, runs the two profiles
    through a shared bottleneck conv, and re-expands into per-row and
    per-column sigmoid gates multiplied onto the input.
    """

    def __init__(self, channels, rng, reduction=8, init_scale=1.0):
        mid = max(8, channels // reduction)
        self.squeeze = nn.ConvNormAct(channels, mid, 1, rng, init_scale=init_scale)
        self.expand_h = nn.Conv2d(mid, channels, 1, rng, init_scale=init_scale)
        self.expand_w = nn.Conv2d(mid, channels, 1, rng, init_scale=init_scale)

    def forward(self, x):
        B, C, H, W = x.shape
        pool_h = T.tmean(x, axes=(3,), keepdims=True)            # (B,C,H,1)
        pool_w = T.transpose(T.tmean(x, axes=(2,), keepdims=True),
                             (0, 1, 3, 2))                       # (B,C,W,1)
        mixed = self.squeeze(T.concat([pool_h, pool_w], axis=2))  # (B,mid,H+W,1)
        part_h = T.narrow(mixed, 2, 0, H)
        part_w = T.transpose(T.narrow(mixed, 2, H, W), (0, 1, 3, 2))
        gate_h = T.sigmoid(self.expand_h(part_h))                # (B,C,H,1)
        gate_w = T.sigmoid(self.expand_w(part_w))                # (B,C,1,W)
        return x * gate_h * gate_w


class ModalityInjection(nn.Module):
    """f_out = w_prim * f_prim + CoordGate(w_supp * f_supp), weights learned."""

    def __init__(self, channels, rng, init_scale=1.0):
        self.weigher = nn.Conv2d(2 * channels, 2, 3, rng, padding=1,
                                 init_scale=init_scale)
        self.gate = CoordinateAttention(channels, rng, init_scale=init_scale)
        self.channels = channels

    def modality_weights(self, f_prim, f_supp):
        """Per-sample scalar pair, each strictly inside (0, 1)."""
        both = T.concat([f_prim, f_supp], axis=1)
        scores = T.sigmoid(self.weigher(both))                   # (B,2,H,W)
        avg = T.global_avg_pool(scores)                          # (B,2)
        w_prim = T.reshape(T.narrow(avg, 1, 0, 1), (-1, 1, 1, 1))
        w_supp = T.reshape(T.narrow(avg, 1, 1, 1), (-1, 1, 1, 1))
        return w_prim, w_supp

    def forward(self, f_prim, f_supp):
        if f_prim.shape != f_supp.shape:
            raise ShapeError(
                f"modality maps must match: {f_prim.shape} vs {f_supp.shape}")
        if f_prim.shape[1] != self.channels:
            raise ShapeError(
                f"expected {self.channels} channels, got {f_prim.shape[1]}")
        w_prim, w_supp = self.modality_weights(f_prim, f_supp)
        return w_prim * f_prim + self.gate(w_supp * f_supp)
