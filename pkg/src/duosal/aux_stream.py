"""Residual encoder for the supplementary modality.

A compact four-level conv pyramid (strides 4/8/16/32) whose widths track
the trunk branches, with a 1x1 adapter per level. The raw input carries
1 channel (depth, thermal) or up to 12 three-channel focal slices packed
to a fixed 36-channel block — absent slices are all-zero, and conv
linearity makes them inert.
"""

from __future__ import annotations

from . import nn
from . import tensor as T
from .tensor import ShapeError

MAX_FOCAL_SLICES = 12


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, rng, stride=1, init_scale=1.0):
        self.body1 = nn.ConvNormAct(in_ch, out_ch, 3, rng, stride=stride,
                                    init_scale=init_scale)
        self.body2 = nn.ConvNormAct(out_ch, out_ch, 3, rng, act=False,
                                    init_scale=init_scale)
        if stride != 1 or in_ch != out_ch:
            self.short = nn.ConvNormAct(in_ch, out_ch, 1, rng, stride=stride,
                                        act=False, init_scale=init_scale)
        else:
            self.short = None

    def forward(self, x):
        y = self.body2(self.body1(x))
        s = x if self.short is None else self.short(x)
        return T.silu(y + s)


class AuxStream(nn.Module):
    """supp (B, supp_channels, H, W) -> four maps matching the trunk grid."""

    def __init__(self, config, rng):
        ch = config.branch_channels
        sc = config.init_scale
        self.in_channels = config.supp_channels
        self.stem1 = nn.ConvNormAct(self.in_channels, ch[0], 3, rng, stride=2,
                                    init_scale=sc)
        self.stem2 = nn.ConvNormAct(ch[0], ch[0], 3, rng, stride=2, init_scale=sc)
        self.levels = []
        for i in range(4):
            cin = ch[i - 1] if i else ch[0]
            stride = 2 if i else 1
            self.levels.append([
                ResidualBlock(cin, ch[i], rng, stride=stride, init_scale=sc),
                ResidualBlock(ch[i], ch[i], rng, init_scale=sc),
            ])
        self.adapters = [nn.Conv2d(ch[i], ch[i], 1, rng, init_scale=sc)
                         for i in range(4)]

    def named_parameters(self, prefix=""):
        out = []
        out.extend(self.stem1.named_parameters(prefix + "stem1."))
        out.extend(self.stem2.named_parameters(prefix + "stem2."))
        for i, blocks in enumerate(self.levels):
            for j, blk in enumerate(blocks):
                out.extend(blk.named_parameters(f"{prefix}level{i + 1}.{j}."))
        for i, ad in enumerate(self.adapters):
            out.extend(ad.named_parameters(f"{prefix}adapter{i + 1}."))
        return out

    def forward(self, supp):
        if supp.ndim != 4 or supp.shape[1] != self.in_channels:
            raise ShapeError(
                f"supplementary input must be (B,{self.in_channels},H,W), "
                f"got {supp.shape}")
        x = self.stem2(self.stem1(supp))
        feats = []
        for i in range(4):
            for blk in self.levels[i]:
                x = blk(x)
            feats.append(self.adapters[i](x))
        return feats


def pack_focal_stack(slices):
    """Stack K<=12 RGB slices (each (B,3,H,W)) into (B,36,H,W), zero-padded."""
    if len(slices) == 0:
        raise ShapeError("focal stack needs at least one slice")
    if len(slices) > MAX_FOCAL_SLICES:
        raise ShapeError(
            f"focal stack holds at most {MAX_FOCAL_SLICES} slices, got {len(slices)}")
    packed = T.concat(list(slices), axis=1)
    want = 3 * MAX_FOCAL_SLICES
    have = packed.shape[1]
    if have < want:
        packed = T.pad(packed, ((0, 0), (0, want - have), (0, 0), (0, 0)))
    return packed
