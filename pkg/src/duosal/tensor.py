"""Dense tensor engine: numpy storage plus a reverse-mode autodiff tape.

Every value flowing through the model is a `Tensor` wrapping a row-major
numpy array. Operations build a tape of closures; `backward` on a scalar
walks it once and accumulates gradients into requires_grad leaves.

Broadcasting is deliberately restricted: operands must have equal rank
with per-axis extents equal or 1, or one side is a scalar. Every op
checks its output for NaN/Inf (disable with `set_finite_checks` only if
you know why).
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class BackwardError(RuntimeError):
    """Backward called on an invalid target or an already-used graph."""


_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_GRAD_ENABLED = True
_ALLOC_LOG = None      # list of shape tuples while auditing
_FLOP_COUNT = None     # mutable [total] while counting


def set_default_dtype(dtype):
    """Set dtype for newly created tensors; returns the previous one."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    return prev


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(flag):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(flag)
    return prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def alloc_audit(log):
    """Record the shape of every op output into `log` (a list)."""
    global _ALLOC_LOG
    prev = _ALLOC_LOG
    _ALLOC_LOG = log
    try:
        yield log
    finally:
        _ALLOC_LOG = prev


@contextlib.contextmanager
def flop_counter():
    """Count matmul/conv multiply-add FLOPs (2*M*K*N) inside the block."""
    global _FLOP_COUNT
    prev = _FLOP_COUNT
    _FLOP_COUNT = [0]
    try:
        yield _FLOP_COUNT
    finally:
        _FLOP_COUNT = prev


def _add_flops(n):
    if _FLOP_COUNT is not None:
        _FLOP_COUNT[0] += int(n)


class Tensor:
    """Dense N-d array with optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self):
        return self._bwd is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        out._done = False
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _make(data, parents, bwd):
    """Wrap an op result; records the tape edge when grad mode is on."""
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NonFiniteError(f"op produced non-finite values (shape {data.shape})")
    if _ALLOC_LOG is not None:
        _ALLOC_LOG.append(tuple(data.shape))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_broadcast(sa, sb):
    if sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch {sa} vs {sb} (broadcast needs equal rank or scalar)")
    for a, b in zip(sa, sb):
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"incompatible shapes {sa} vs {sb}")


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make(ad / bd, (a, b), bwd)


def neg(a):
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def exp(a):
    y = np.exp(a.data)

    def bwd(g):
        return (g * y,)

    return _make(y, (a,), bwd)


def log(a):
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), bwd)


def sqrt(a):
    y = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / y),)

    return _make(y, (a,), bwd)


def _sigmoid(x):
    # stable in both tails: exp of a non-positive argument only
    p = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, p, 1.0 - p)


def sigmoid(a):
    y = _sigmoid(a.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bwd)


def silu(a):
    s = _sigmoid(a.data)
    ad = a.data

    def bwd(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _make(ad * s, (a,), bwd)


def softplus(a):
    ad = a.data
    y = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

    def bwd(g):
        return (g * _sigmoid(ad),)

    return _make(y, (a,), bwd)


def softmax(a, axis):
    """Max-subtracted softmax along `axis`; sums to 1 there."""
    if a.shape[axis] < 1:
        raise ShapeError("softmax needs extent >= 1 along its axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


# -- reductions --------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def tmean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    n = 1
    for ax in axes:
        n *= shape[ax]

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), bwd)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    if not axes:
        axes = tuple(range(a.ndim - 1, -1, -1))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(parts, axis):
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offs[i], offs[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def narrow(a, axis, start, length):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def pad(a, pads):
    """Zero-pad; `pads` is a ((before, after), ...) per axis."""
    pads = tuple(tuple(p) for p in pads)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(pads, a.shape))

    def bwd(g):
        return (np.ascontiguousarray(g[sl]),)

    return _make(np.pad(a.data, pads), (a,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner mismatch {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)
    _add_flops(2 * y.size * a.shape[-1])
    ad, bd = a.data, b.data

    def bwd(g):
        da = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        db = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return da, db

    return _make(y, (a, b), bwd)


# -- convolution -------------------------------------------------------------


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, H, W = x.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    cols = np.empty((B, C, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(B, C * kh * kw, ho * wo), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Direct cross-correlation: x (B,Cin,H,W), weight (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    B, C, H, W = x.shape
    co, ci, kh, kw = weight.shape
    if ci != C:
        raise ShapeError(f"conv2d channel mismatch: input {C} vs kernel {ci}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols)                     # (B, co, ho*wo)
    _add_flops(2 * out.size * wmat.shape[1])
    if bias is not None:
        out += bias.data.reshape(1, co, 1)
    out = out.reshape(B, co, ho, wo)

    def bwd(g):
        gf = g.reshape(B, co, ho * wo)
        dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wmat.T, gf).reshape(B, ci, kh, kw, ho, wo)
        hp, wp = H + 2 * padding, W + 2 * padding
        dxp = np.zeros((B, ci, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        if bias is not None:
            return np.ascontiguousarray(dx), dw, gf.sum(axis=(0, 2))
        return np.ascontiguousarray(dx), dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bwd)


# -- pooling / resize --------------------------------------------------------


def global_avg_pool(x):
    """(B,C,H,W) -> (B,C) arithmetic mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D map")
    return reshape(tmean(x, axes=(2, 3), keepdims=False), x.shape[:2])


@lru_cache(maxsize=128)
def _interp_matrix(n_in, n_out, dtype_name):
    """Row-stochastic bilinear interpolation matrix, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation of (B,C,H,W) to (B,C,out_h,out_w)."""
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects a 4-D map")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize target must be positive")
    B, C, H, W = x.shape
    if (out_h, out_w) == (H, W):
        return x
    dt = x.dtype.name
    rw = Tensor(_interp_matrix(W, out_w, dt).T)     # (W, out_w)
    rh = Tensor(_interp_matrix(H, out_h, dt))       # (out_h, H)
    t = matmul(reshape(x, (B * C, H, W)), rw)       # (B*C, H, out_w)
    t = matmul(rh, t)                               # (B*C, out_h, out_w)
    return reshape(t, (B, C, out_h, out_w))


# -- backward pass -----------------------------------------------------------


def backward(loss):
    """Reverse-mode sweep from a scalar; accumulates into leaf .grad."""
    if not isinstance(loss, Tensor):
        raise BackwardError("backward target must be a Tensor")
    if loss.size != 1:
        raise BackwardError(f"backward target must be scalar, got shape {loss.shape}")
    if loss._done:
        raise BackwardError("backward already ran on this graph; rebuild it or reset")
    loss._done = True
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for p, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                # out-of-place: identity-like ops (add, reshape, ...) hand
                # back `g` itself, so a pending entry may alias a buffer
                # other entries still read; += here would corrupt them
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
