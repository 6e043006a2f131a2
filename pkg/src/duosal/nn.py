"""Layer scaffolding over the tensor engine.

Modules hold parameters as requires_grad Tensors in __dict__ insertion
order, so parameter naming (used by checkpoints) is deterministic for a
given config. All randomness comes from an explicit seeded generator.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal container: walks its own attributes for parameters."""

    def named_parameters(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}{name}" if prefix else name
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng, shape, fan_in, scale=1.0):
    std = scale * np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _xavier(rng, shape, fan_in, fan_out, scale=1.0):
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    """y = x @ weight + bias, weight stored (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, bias=True, init_scale=1.0):
        self.weight = _xavier(rng, (in_features, out_features), in_features,
                              out_features, init_scale)
        self.bias = zeros_param((out_features,)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1,) * (y.ndim - 1) + (-1,))
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 bias=True, init_scale=1.0):
        fan_in = in_ch * kernel * kernel
        self.weight = _he(rng, (out_ch, in_ch, kernel, kernel), fan_in, init_scale)
        self.bias = zeros_param((out_ch,)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def _normalize(x, axes, gamma, beta, eps=1e-5):
    mu = T.tmean(x, axes=axes, keepdims=True)
    xc = x - mu
    var = T.tmean(xc * xc, axes=axes, keepdims=True)
    xn = xc / T.sqrt(var + eps)
    return xn * gamma + beta


class TokenNorm(Module):
    """Normalizes each token over its channel axis; x is (..., dim)."""

    def __init__(self, dim, eps=1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def forward(self, x):
        shape = (1,) * (x.ndim - 1) + (-1,)
        return _normalize(x, (-1,), T.reshape(self.gamma, shape),
                          T.reshape(self.beta, shape), self.eps)


class MapChannelNorm(Module):
    """Token-style norm for conv maps: per-position, over the channel axis."""

    def __init__(self, channels, eps=1e-5):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.eps = eps

    def forward(self, x):
        g = T.reshape(self.gamma, (1, -1, 1, 1))
        b = T.reshape(self.beta, (1, -1, 1, 1))
        return _normalize(x, (1,), g, b, self.eps)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization over the spatial plane.

    A 1x1 plane has zero variance; the output there is exactly beta and
    the incoming gradient w.r.t. x vanishes, which is fine — affine
    params still learn.
    """

    def __init__(self, channels, eps=1e-5):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.eps = eps

    def forward(self, x):
        g = T.reshape(self.gamma, (1, -1, 1, 1))
        b = T.reshape(self.beta, (1, -1, 1, 1))
        return _normalize(x, (2, 3), g, b, self.eps)


class ConvNormAct(Module):
    """3x3 (or 1x1) conv -> instance norm -> SiLU; conv bias off (norm eats it).

    The norm runs with a fat eps: a constant input plane (all-zero
    supplementary stream, 1x1 spatial maps) parks the norm at its zero-
    variance point, where backward scales by 1/sqrt(eps) per layer — a
    tight eps turns deep chains of these into float32 overflow.
    """

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, act=True, init_scale=1.0):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride,
                           padding=kernel // 2, bias=False, init_scale=init_scale)
        self.norm = InstanceNorm2d(out_ch, eps=1e-3)
        self.act = act

    def forward(self, x):
        y = self.norm(self.conv(x))
        return T.silu(y) if self.act else y


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))
