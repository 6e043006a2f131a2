"""Optimizers. AdamW keeps per-parameter moment buffers keyed by name."""

from __future__ import annotations

import numpy as np


def global_grad_norm(named_params):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return np.sqrt(total)


class AdamW:
    """Decoupled weight decay Adam with optional global-norm clipping.

    update: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)

    Moments are float64 regardless of parameter dtype — squared float32
    gradients near the dtype ceiling would otherwise overflow.
    """

    def __init__(self, named_params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4, grad_clip=None):
        self.named_params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros(p.data.shape) for name, p in self.named_params}
        self.v = {name: np.zeros(p.data.shape) for name, p in self.named_params}

    def step(self):
        scale = 1.0
        if self.grad_clip is not None:
            norm = global_grad_norm(self.named_params)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64, copy=False) * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mh = m / bc1
            vh = v / bc2
            p.data -= (self.lr * (mh / (np.sqrt(vh) + self.eps)
                                  + self.weight_decay * p.data.astype(np.float64))
                       ).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
