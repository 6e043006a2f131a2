"""Cross-resolution token fusion, coarsest level first.

Each pyramid level is flattened into a token sequence of a shared width.
One fusion unit per level runs self-attention, then cross-attention over
the concatenated tokens of the other three levels, then an MLP — all in
the linear-cost attention form, so no quadratic score matrix ever
exists. The coarsest level fuses first; finer levels then see already-
fused coarse tokens in their cross-attention context, and the finest
fused sequence folds back into a map for the prediction head.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


def level_token_counts(config):
    """Tokens per pyramid level {1..4} at the configured input size."""
    out = {}
    for lv in range(1, 5):
        h, w = config.level_hw(lv)
        out[lv] = h * w
    return out


def asso_token_counts(config):
    """Cross-attention context length for each level's fusion unit."""
    n = level_token_counts(config)
    return {lv: sum(n[o] for o in n if o != lv) for lv in range(1, 5)}


def sinusoid_positions(h, w, dim):
    """Fixed 2-D position code, (h*w, dim), rows in raster order.

    First half of the channels encodes the normalized row coordinate,
    second half the column, as interleaved sin/cos pairs over a
    geometric frequency ladder.
    """
    if dim % 4:
        raise ShapeError("position code width must be a multiple of 4")
    half = dim // 2
    npair = half // 2
    freqs = 10000.0 ** (-2.0 * np.arange(npair) / half)

    def axis_code(n):
        u = np.arange(n) / max(n - 1, 1)
        ang = 2.0 * np.pi * u[:, None] * freqs[None, :]
        code = np.empty((n, half))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code

    ys = axis_code(h)
    xs = axis_code(w)
    out = np.empty((h * w, dim))
    for r in range(h):
        out[r * w:(r + 1) * w, :half] = ys[r]
        out[r * w:(r + 1) * w, half:] = xs
    return out


class PositionEmbedding(nn.Module):
    """Fixed sinusoid per grid position plus a learned per-level offset."""

    def __init__(self, config, rng):
        self.level_table = Tensor(
            rng.normal(0.0, 0.02, size=(4, config.token_dim)), requires_grad=True)
        self._fixed = {}
        for lv in range(1, 5):
            h, w = config.level_hw(lv)
            self._fixed[lv] = sinusoid_positions(h, w, config.token_dim)

    def forward(self, tokens, level):
        fixed = Tensor(self._fixed[level][None, :, :].copy())
        offs = T.reshape(T.narrow(self.level_table, 0, level - 1, 1), (1, 1, -1))
        return tokens + fixed + offs


class EfficientAttention(nn.Module):
    """Linear-cost attention: softmax over query channels and key tokens.

    context = rho_k(K)^T V is (head_dim x head_dim); queries then read it
    directly. Cost grows linearly in both token counts and the score
    matrix (N_q x N_kv) is never materialized.
    """

    def __init__(self, dim, heads, rng, init_scale=1.0):
        if dim % heads:
            raise ShapeError(f"token width {dim} not divisible by heads {heads}")
        self.q = nn.Linear(dim, dim, rng, init_scale=init_scale)
        self.k = nn.Linear(dim, dim, rng, init_scale=init_scale)
        self.v = nn.Linear(dim, dim, rng, init_scale=init_scale)
        self.proj = nn.Linear(dim, dim, rng, init_scale=init_scale)
        self.heads = heads

    def forward(self, queries, context):
        B, nq, D = queries.shape
        if context.ndim != 3 or context.shape[0] != B or context.shape[2] != D:
            raise ShapeError(
                f"context {context.shape} incompatible with queries {queries.shape}")
        nkv = context.shape[1]
        h = self.heads
        hd = D // h

        def heads_of(z, n):
            return T.transpose(T.reshape(z, (B, n, h, hd)), (0, 2, 1, 3))

        q = T.softmax(heads_of(self.q(queries), nq), axis=-1)
        k = T.softmax(heads_of(self.k(context), nkv), axis=-2)
        v = heads_of(self.v(context), nkv)
        ctx = T.matmul(T.transpose(k, (0, 1, 3, 2)), v)      # (B,h,hd,hd)
        out = T.matmul(q, ctx)                               # (B,h,nq,hd)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, nq, D))
        return self.proj(out)


class FusionUnit(nn.Module):
    """Self-attention, cross-attention over the partner levels, then MLP.

    Post-norm: each sublayer's residual sum is normalized before moving on.
    """

    def __init__(self, dim, heads, ffn_ratio, depth, rng, init_scale=1.0):
        self.layers = []
        for _ in range(depth):
            self.layers.append({
                "self_attn": EfficientAttention(dim, heads, rng, init_scale),
                "norm1": nn.TokenNorm(dim),
                "cross_attn": EfficientAttention(dim, heads, rng, init_scale),
                "norm2": nn.TokenNorm(dim),
                "fc1": nn.Linear(dim, dim * ffn_ratio, rng, init_scale=init_scale),
                "fc2": nn.Linear(dim * ffn_ratio, dim, rng, init_scale=init_scale),
                "norm3": nn.TokenNorm(dim),
            })

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            for key, mod in layer.items():
                out.extend(mod.named_parameters(f"{prefix}layer{i}.{key}."))
        return out

    def forward(self, x, asso):
        for layer in self.layers:
            x = layer["norm1"](x + layer["self_attn"](x, x))
            x = layer["norm2"](x + layer["cross_attn"](x, asso))
            x = layer["norm3"](x + layer["fc2"](T.silu(layer["fc1"](x))))
        return x


class FusionState:
    """Bookkeeping for the coarse-to-fine pass; trips on out-of-order reads."""

    def __init__(self):
        self.fused = {}
        self.execution_order = []

    def write(self, level, tokens):
        self.fused[level] = tokens
        self.execution_order.append(level)

    def read_fused(self, level):
        if level not in self.fused:
            raise RuntimeError(
                f"level {level} tokens read before that level was fused "
                f"(order so far: {self.execution_order})")
        return self.fused[level]


class TokenFusion(nn.Module):
    """Everything from four maps to the fused finest-level map."""

    def __init__(self, config, rng):
        D = config.token_dim
        sc = config.init_scale
        self.tokenizers = [nn.Conv2d(config.branch_channels[i], D, 1, rng,
                                     init_scale=sc) for i in range(4)]
        self.pos = PositionEmbedding(config, rng)
        self.units = [FusionUnit(D, config.attention_heads, config.ffn_ratio,
                                 config.triple_it_depth, rng, init_scale=sc)
                      for _ in range(4)]
        self.config = config

    def named_parameters(self, prefix=""):
        out = []
        for i, tk in enumerate(self.tokenizers):
            out.extend(tk.named_parameters(f"{prefix}tokenizer{i + 1}."))
        out.extend(self.pos.named_parameters(prefix + "pos."))
        for i, unit in enumerate(self.units):
            out.extend(unit.named_parameters(f"{prefix}unit{i + 1}."))
        return out

    def tokenize(self, feat, level):
        """1x1-project a map to token width and flatten raster order."""
        B, _, H, W = feat.shape
        want = self.config.level_hw(level)
        if (H, W) != want:
            raise ShapeError(f"level {level} map is {(H, W)}, expected {want}")
        z = self.tokenizers[level - 1](feat)
        z = T.transpose(T.reshape(z, (B, z.shape[1], H * W)), (0, 2, 1))
        return self.pos(z, level)

    def detokenize(self, tokens, level):
        B, N, D = tokens.shape
        h, w = self.config.level_hw(level)
        if N != h * w:
            raise ShapeError(f"level {level} expects {h * w} tokens, got {N}")
        return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, D, h, w))

    def forward(self, feats):
        """feats: four maps, finest first. Returns the fused finest map."""
        if len(feats) != 4:
            raise ShapeError("fusion expects exactly four maps")
        orig = {lv: self.tokenize(feats[lv - 1], lv) for lv in range(1, 5)}
        state = FusionState()
        for lv in (4, 3, 2, 1):
            parts = []
            for other in (1, 2, 3, 4):
                if other == lv:
                    continue
                if other > lv:
                    parts.append(state.read_fused(other))
                else:
                    parts.append(orig[other])
            asso = T.concat(parts, axis=1)
            state.write(lv, self.units[lv - 1](orig[lv], asso))
        self.last_execution_order = state.execution_order
        return self.detokenize(state.read_fused(1), 1)
