"""Differentiable primitives.

Image tensors are laid out NCHW.  Every function accepts Tensors (or array-likes
promoted to constants) and returns a new Tensor; input buffers are never written.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb
    return record("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb
    return record("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log of ``a + eps``."""
    a = as_tensor(a)
    x = a.data + a.data.dtype.type(eps) if eps else a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return record("square", d * d, (a,), lambda g: (2 * g * d,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    d = a.data
    return record("abs", np.abs(d), (a,), lambda g: (g * np.sign(d),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                  lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def hard_swish(a) -> Tensor:
    """x * clamp(x + 3, 0, 6) / 6."""
    a = as_tensor(a)
    x = a.data
    out = x * np.clip(x + 3, 0, 6) / 6

    def back(g):
        d = np.where(x <= -3, 0, np.where(x >= 3, 1, (2 * x + 3) / 6)).astype(x.dtype)
        return (g * d,)
    return record("hard_swish", out.astype(x.dtype), (a,), back)


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return record("clamp", out, (a,), lambda g: (g * inside,))


def smooth_l1(a) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    small = ax < 1
    out = np.where(small, 0.5 * x * x, ax - 0.5).astype(x.dtype)
    return record("smooth_l1", out, (a,),
                  lambda g: (g * np.where(small, x, np.sign(x)).astype(x.dtype),))


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return record("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max(a, axis, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        mask = x == m
        cnt = mask.sum(axis=axis, keepdims=True)
        return (g * mask / cnt).astype(x.dtype),
    out = m if keepdims else np.squeeze(m, axis=axis)
    return record("max", np.ascontiguousarray(out), (a,), back)


# ---------------------------------------------------------------------- shape

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return record("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)
    return record("take", np.take(a.data, idx, axis=axis), (a,), back)


def gather_rows(a, batch_idx, row_idx) -> Tensor:
    """``a[batch_idx, row_idx]`` for a (B, N, K) tensor -> (M, K)."""
    a = as_tensor(a)
    bi = np.asarray(batch_idx, dtype=np.int64)
    ri = np.asarray(row_idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (bi, ri), g)
        return (full,)
    return record("gather_rows", a.data[bi, ri], (a,), back)


def pick(a, indices) -> Tensor:
    """Select one entry per row of a 2-D tensor: out[i] = a[i, indices[i]]."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)
    return record("pick", a.data[rows, idx], (a,), back)


# ----------------------------------------------------------------- linear alg

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return record("matmul", ad @ bd, (a, b), back)


# ------------------------------------------------------------------ softmaxes

def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
    z = a.data / a.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        s = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - s) / p.dtype.type(temperature),)
    return record("softmax", p, (a,), back)


def log_softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be > 0, got {temperature}")
    z = a.data / a.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / p.dtype.type(temperature),)
    return record("log_softmax", out, (a,), back)


# --------------------------------------------------------------- convolutions

def _pad_hw(x: np.ndarray, p: int, value=0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x, w, b=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Dense 2-D convolution. x: (N, Cin, H, W), w: (Cout, Cin, k, k), b: (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    p = k // 2 if padding is None else padding
    if k == 1 and p == 0:
        return _conv1x1(x, w, b, stride)
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = _out_size(h, k, stride, p), _out_size(wd, k, stride, p)
    xp = _pad_hw(x.data, p)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g2.sum(axis=0) if b.requires_grad else None)
        return res
    return record("conv2d", np.ascontiguousarray(out), inputs, back)


def _conv1x1(x: Tensor, w: Tensor, b, stride: int) -> Tensor:
    xd = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    n, cin, h, wd = xd.shape
    cout = w.shape[0]
    wmat = w.data.reshape(cout, cin)
    xf = xd.reshape(n, cin, h * wd)
    out = wmat @ xf
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    inputs = (x, w) if b is None else (x, w, b)
    full_shape = x.shape

    def back(g):
        gf = g.reshape(n, cout, h * wd)
        gw = None
        if w.requires_grad:
            gw = np.einsum("nop,nip->oi", gf, xf, optimize=True).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxs = (wmat.T @ gf).reshape(n, cin, h, wd)
            if stride > 1:
                gx = np.zeros(full_shape, dtype=g.dtype)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
        res = [gx, gw]
        if b is not None:
            res.append(gf.sum(axis=(0, 2)) if b.requires_grad else None)
        return res
    return record("conv1x1", out.reshape(n, cout, h, wd), inputs, back)


def depthwise_conv2d(x, w, b=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Per-channel convolution. x: (N, C, H, W), w: (C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[1]
    p = k // 2 if padding is None else padding
    n, c, h, wd = x.shape
    ho, wo = _out_size(h, k, stride, p), _out_size(wd, k, stride, p)
    xp = _pad_hw(x.data, p)
    wd_ = w.data
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * wd_[None, :, i, j, None, None]
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gw = np.zeros(wd_.shape, dtype=g.dtype) if w.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                      slice(j, j + stride * wo, stride))
                if gw is not None:
                    gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl], optimize=True)
                if gxp is not None:
                    gxp[sl] += g * wd_[None, :, i, j, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return res
    return record("depthwise_conv2d", out, inputs, back)


# -------------------------------------------------------------- normalization

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In training mode batch statistics normalise the input and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs scale {gamma.shape} / shift {beta.shape}")
    xd = x.data
    dt = xd.dtype
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * (m / builtins.max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        m = None
        mu = running_mean.astype(dt)
        var = running_var.astype(dt)
        xc = xd - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = xc * inv[None, :, None, None]
    g_ = gamma.data[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                s1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - s1 - xhat * s2) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta
    return record("batch_norm", out, (x, gamma, beta), back)


# -------------------------------------------------------------------- pooling

def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def global_max_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    return max(reshape(x, (n, c, -1)), axis=2)


def max_pool2d(x) -> Tensor:
    """2x2 max pool with stride 2; odd sizes are padded so H_out = ceil(H/2)."""
    x = as_tensor(x)
    xd = x.data
    n, c, h, w = xd.shape
    ho, wo = -(-h // 2), -(-w // 2)
    if (h % 2) or (w % 2):
        xd = np.pad(xd, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
                    constant_values=-np.inf)
    blocks = xd.reshape(n, c, ho, 2, wo, 2)
    out = blocks.max(axis=(3, 5))

    def back(g):
        mask = blocks == out[:, :, :, None, :, None]
        # first maximum of each window takes the gradient
        flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        first = np.zeros_like(flat)
        idx = flat.argmax(axis=-1)
        np.put_along_axis(first, idx[..., None], True, axis=-1)
        sel = first.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gfull = (sel * g[:, :, :, None, :, None]).reshape(n, c, 2 * ho, 2 * wo)
        return (np.ascontiguousarray(gfull[:, :, :h, :w]),)
    return record("max_pool2d", np.ascontiguousarray(out), (x,), back)


def upsample_nearest(x, size: tuple) -> Tensor:
    """Nearest-neighbour x2 upsample, cropped to ``size`` = (H, W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    th, tw = size
    if not (2 * h - 1 <= th <= 2 * h and 2 * w - 1 <= tw <= 2 * w):
        raise ShapeError(f"upsample_nearest: cannot map {x.shape[2:]} to {size} with factor 2")
    up = x.data.repeat(2, axis=2).repeat(2, axis=3)[:, :, :th, :tw]

    def back(g):
        gp = np.zeros((n, c, 2 * h, 2 * w), dtype=g.dtype)
        gp[:, :, :th, :tw] = g
        return (gp.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return record("upsample_nearest", np.ascontiguousarray(up), (x,), back)
