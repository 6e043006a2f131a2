"""Multi-resolution transformer trunk.

Keeps four parallel branches at strides 4/8/16/32. Each stage adds one
branch (strided conv off the previous lowest branch), runs windowed
self-attention blocks on every live branch, then cross-pollinates
branches with an exchange unit (strided convs down, bilinear+1x1 up).

External per-branch features can be added right where each branch is
born — pass them as `stage_inputs`; zeros reduce to the plain trunk.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor


class WindowedSelfAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows.

    The map is zero-padded on the bottom/right up to a window multiple;
    padded keys are masked out with a large negative score and padded
    query rows are cropped after the inverse window shuffle. A window
    covering the whole (padded) map degenerates to full attention.
    """

    def __init__(self, channels, heads, window, rng, init_scale=1.0):
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.q = nn.Linear(channels, channels, rng, init_scale=init_scale)
        self.k = nn.Linear(channels, channels, rng, init_scale=init_scale)
        self.v = nn.Linear(channels, channels, rng, init_scale=init_scale)
        self.proj = nn.Linear(channels, channels, rng, init_scale=init_scale)
        self.heads = heads
        self.window = window

    def _window_mask(self, hp, wp, h, w, batch_windows):
        """Additive key mask, (batch*windows, 1, 1, win*win); 0 real, -1e9 pad."""
        win = self.window
        real = np.zeros((hp, wp))
        real[:h, :w] = 1.0
        real = real.reshape(hp // win, win, wp // win, win).transpose(0, 2, 1, 3)
        real = real.reshape(-1, win * win)               # (windows, T)
        mask = np.where(real > 0, 0.0, -1e9)
        nw = mask.shape[0]
        mask = np.broadcast_to(mask.reshape(1, nw, 1, 1, win * win),
                               (batch_windows // nw, nw, 1, 1, win * win))
        return Tensor(mask.reshape(batch_windows, 1, 1, win * win).copy())

    def forward(self, x):
        B, C, H, W = x.shape
        win = self.window
        hp = -(-H // win) * win
        wp = -(-W // win) * win
        if (hp, wp) != (H, W):
            x = T.pad(x, ((0, 0), (0, 0), (0, hp - H), (0, wp - W)))
        nwh, nww = hp // win, wp // win
        t = win * win

        tok = T.reshape(x, (B, C, nwh, win, nww, win))
        tok = T.transpose(tok, (0, 2, 4, 3, 5, 1))
        tok = T.reshape(tok, (B * nwh * nww, t, C))

        hd = C // self.heads

        def split_heads(z):
            z = T.reshape(z, (B * nwh * nww, t, self.heads, hd))
            return T.transpose(z, (0, 2, 1, 3))

        q = split_heads(self.q(tok))
        k = split_heads(self.k(tok))
        v = split_heads(self.v(tok))

        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        if (hp, wp) != (H, W):
            scores = scores + self._window_mask(hp, wp, H, W, B * nwh * nww)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)                          # (B*nW, heads, t, hd)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B * nwh * nww, t, C))
        out = self.proj(out)

        out = T.reshape(out, (B, nwh, nww, win, win, C))
        out = T.transpose(out, (0, 5, 1, 3, 2, 4))
        out = T.reshape(out, (B, C, hp, wp))
        if (hp, wp) != (H, W):
            out = T.narrow(T.narrow(out, 2, 0, H), 3, 0, W)
        return out


class TransformerBlock(nn.Module):
    """Post-norm block: norm after each residual add (attention, then MLP)."""

    def __init__(self, channels, heads, window, ffn_ratio, rng, init_scale=1.0):
        self.attn = WindowedSelfAttention(channels, heads, window, rng, init_scale)
        self.norm1 = nn.MapChannelNorm(channels)
        self.fc1 = nn.Conv2d(channels, channels * ffn_ratio, 1, rng,
                             init_scale=init_scale)
        self.fc2 = nn.Conv2d(channels * ffn_ratio, channels, 1, rng,
                             init_scale=init_scale)
        self.norm2 = nn.MapChannelNorm(channels)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        y = self.fc2(T.silu(self.fc1(x)))
        return self.norm2(x + y)


class ExchangeUnit(nn.Module):
    """Fuses k parallel maps: every branch receives every other branch.

    Moving down r steps = r strided 3x3 conv+norm stages (activation on
    all but the last); moving up = bilinear resize then 1x1 conv+norm.
    Contributions are summed and passed through SiLU.
    """

    def __init__(self, channels, rng, init_scale=1.0):
        self.paths = []
        k = len(channels)
        for dst in range(k):
            row = []
            for src in range(k):
                if src == dst:
                    row.append(None)
                elif src < dst:                      # downsample chain
                    chain = []
                    for step in range(dst - src):
                        cin = channels[src] if step == 0 else channels[dst]
                        last = step == dst - src - 1
                        chain.append(nn.ConvNormAct(cin, channels[dst], 3, rng,
                                                    stride=2, act=not last,
                                                    init_scale=init_scale))
                    row.append(chain)
                else:                                # upsample
                    row.append([nn.ConvNormAct(channels[src], channels[dst], 1,
                                               rng, act=False,
                                               init_scale=init_scale)])
            self.paths.append(row)
        self.k = k

    def named_parameters(self, prefix=""):
        out = []
        for dst, row in enumerate(self.paths):
            for src, path in enumerate(row):
                if path is None:
                    continue
                for step, mod in enumerate(path):
                    out.extend(mod.named_parameters(
                        f"{prefix}path{dst}_{src}.{step}."))
        return out

    def forward(self, feats):
        outs = []
        for dst in range(self.k):
            acc = feats[dst]
            th, tw = feats[dst].shape[2], feats[dst].shape[3]
            for src in range(self.k):
                if src == dst:
                    continue
                path = self.paths[dst][src]
                y = feats[src]
                if src > dst:                        # up: resize first
                    y = T.bilinear_resize(y, th, tw)
                for mod in path:
                    y = mod(y)
                acc = acc + y
            outs.append(T.silu(acc))
        return outs


class Backbone(nn.Module):
    """Stride-4 stem plus four stages of windowed-attention branches."""

    def __init__(self, config, rng):
        ch = config.branch_channels
        sc = config.init_scale
        self.stem1 = nn.ConvNormAct(3, ch[0], 3, rng, stride=2, init_scale=sc)
        self.stem2 = nn.ConvNormAct(ch[0], ch[0], 3, rng, stride=2, init_scale=sc)

        self.transitions = []                        # new-branch makers, stages 2..4
        for s in range(1, 4):
            self.transitions.append(
                nn.ConvNormAct(ch[s - 1], ch[s], 3, rng, stride=2, init_scale=sc))

        self.stages = []                             # stages x branches x blocks
        for s in range(4):
            branches = []
            for b in range(s + 1):
                blocks = [TransformerBlock(ch[b], config.attention_heads,
                                           config.window_size, config.ffn_ratio,
                                           rng, init_scale=sc)
                          for _ in range(config.blocks_per_stage[s])]
                branches.append(blocks)
            self.stages.append(branches)

        self.exchanges = []                          # after stages 2..4
        for s in range(1, 4):
            self.exchanges.append(ExchangeUnit(ch[:s + 1], rng, init_scale=sc))

        self.config = config

    def named_parameters(self, prefix=""):
        out = []
        out.extend(self.stem1.named_parameters(prefix + "stem1."))
        out.extend(self.stem2.named_parameters(prefix + "stem2."))
        for i, tr in enumerate(self.transitions):
            out.extend(tr.named_parameters(f"{prefix}transition{i + 1}."))
        for s, branches in enumerate(self.stages):
            for b, blocks in enumerate(branches):
                for j, blk in enumerate(blocks):
                    out.extend(blk.named_parameters(
                        f"{prefix}stage{s + 1}.branch{b + 1}.block{j}."))
        for i, ex in enumerate(self.exchanges):
            out.extend(ex.named_parameters(f"{prefix}exchange{i + 1}."))
        return out

    def stem(self, image):
        return self.stem2(self.stem1(image))

    def expected_entry_shapes(self, batch):
        ch = self.config.branch_channels
        return [(batch, ch[i]) + self.config.level_hw(i + 1) for i in range(4)]

    def forward_with_entries(self, image, entry_fn):
        """Run the trunk with entry_fn(branch_index, raw_entry) -> entry.

        entry_fn sees the stem output (branch 0) or the strided transition
        output (branches 1..3) the moment that branch is created, and its
        return value becomes the branch's actual entry. Identity reduces
        to the plain trunk. Returns the four refined maps, finest first.
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) image, got {image.shape}")
        hw = (image.shape[2], image.shape[3])
        if hw != tuple(self.config.input_hw):
            raise ShapeError(f"image is {hw}, config wants {self.config.input_hw}")

        feats = [entry_fn(0, self.stem(image))]
        for s in range(4):
            if s > 0:
                feats.append(entry_fn(s, self.transitions[s - 1](feats[-1])))
            feats = [self._run_blocks(self.stages[s][b], f)
                     for b, f in enumerate(feats)]
            if s > 0:
                feats = self.exchanges[s - 1](feats)
        return feats

    def forward_injected(self, image, stage_inputs):
        """Additive form: stage_inputs[i] is summed onto branch i's entry."""
        if len(stage_inputs) != 4:
            raise ShapeError("stage_inputs must carry one map per branch (4)")
        B = image.shape[0]
        for i, (inj, want) in enumerate(zip(stage_inputs,
                                            self.expected_entry_shapes(B))):
            if inj.shape != want:
                raise ShapeError(
                    f"stage {i + 1} injection has shape {inj.shape}, expected {want}")
        return self.forward_with_entries(
            image, lambda i, raw: raw + stage_inputs[i])

    @staticmethod
    def _run_blocks(blocks, x):
        for blk in blocks:
            x = blk(x)
        return x

    def forward(self, image):
        return self.forward_with_entries(image, lambda i, raw: raw)
