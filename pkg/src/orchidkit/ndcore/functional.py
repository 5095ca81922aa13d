"""Neural-network primitives with hand-written vector-Jacobian products.

All spatial ops use NCHW layout. ``conv2d`` also accepts a single CHW image.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _emit, _val


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """[C*k*k, N*out_h*out_w] patch matrix; this layout copies fastest."""
    c = xp.shape[1]
    return _windows(xp, k, stride, out_h, out_w).transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, -1)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] (or [C,H,W]) with ``weight`` [O,C,k,k]."""
    xv, wv = _val(x), _val(weight)
    if xv.ndim == 3:
        out = conv2d(_as_batched(x), weight, bias, stride, padding)
        from .tensor import reshape

        return reshape(out, out.shape[1:])
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ShapeError(f"conv2d kernel must be [O,C,k,k], got {wv.shape}")
    n, c, h, w = xv.shape
    o, ci, k, _ = wv.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d input {h}x{w} too small for kernel {k} with padding {padding}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = wv.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, out_h, out_w).transpose(1, 0, 2, 3)
    bv = None
    if bias is not None:
        bv = _val(bias)
        out = out + bv[None, :, None, None]
    out = np.ascontiguousarray(out)
    x_needs_grad = isinstance(x, Tensor) and x.requires_grad

    def vjp(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gt @ cols.T).reshape(wv.shape)
        gb = g.sum(axis=(0, 2, 3)) if bv is not None else None
        if not x_needs_grad:
            return None, gw, gb
        if stride == 1:
            # input gradient is a full correlation with the flipped kernel
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
            flipped = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
            gx = (flipped @ _im2col(gp, k, 1, h, w)).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            return gx, gw, gb
        dcols = (wmat.T @ gt).reshape(c, k, k, n, out_h, out_w)
        dxp = np.zeros((c, n) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += dcols[
                    :, i, j
                ]
        dxp = dxp.transpose(1, 0, 2, 3)
        gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, vjp if bias is not None else (lambda g: vjp(g)[:2]))


def _as_batched(x):
    from .tensor import reshape

    return reshape(x, (1,) + tuple(_val(x).shape))


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is [C_in, C_out, k, k]."""
    xv, wv = _val(x), _val(weight)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError("conv_transpose2d expects [N,C,H,W] input and [C_in,C_out,k,k] kernel")
    n, c, h, w = xv.shape
    ci, o, k, k2 = wv.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv_transpose2d kernel {wv.shape} incompatible with input {xv.shape}")
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d padding removes the whole output")
    xmat = xv.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = wv.reshape(c, o * k * k)
    contrib = (xmat @ wmat).reshape(n, h, w, o, k, k)
    full = np.zeros((n, o, full_h, full_w))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += contrib[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, padding : padding + out_h, padding : padding + out_w]
    bv = None
    if bias is not None:
        bv = _val(bias)
        out = out + bv[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gfull = np.zeros((n, o, full_h, full_w))
        gfull[:, :, padding : padding + out_h, padding : padding + out_w] = g
        win = _windows(gfull, k, stride, h, w)  # n,o,h,w,k,k
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, o * k * k)
        gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gw = (xmat.T @ gcols).reshape(wv.shape)
        gb = g.sum(axis=(0, 2, 3)) if bv is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv_transpose2d", out, inputs, vjp if bias is not None else (lambda g: vjp(g)[:2]))


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    xv = _val(x)
    n, c, h, w = xv.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    gv, bv = _val(gamma), _val(beta)
    xr = xv.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    centered = xr - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=2, keepdims=True) + eps)
    xhat = (centered * inv).reshape(xv.shape)
    out = xhat * gv[None, :, None, None] + bv[None, :, None, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gv[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(xv.shape), dgamma, dbeta

    return _emit("group_norm", out, (x, gamma, beta), vjp)


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping average pooling by an integer factor."""
    xv = _val(x)
    n, c, h, w = xv.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    out = xv.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (up / (factor * factor),)

    return _emit("avg_pool2d", out, (x,), vjp)


def upsample_nearest2d(x, factor: int) -> Tensor:
    xv = _val(x)
    n, c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, factor, axis=2), factor, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest2d", out, (x,), vjp)


def box_filter(x, size: int) -> Tensor:
    """Same-size zero-padded mean filter applied to each channel independently."""
    from .tensor import reshape

    xv = _val(x)
    n, c, h, w = xv.shape
    kernel = np.full((1, 1, size, size), 1.0 / (size * size))
    flat = reshape(x, (n * c, 1, h, w))
    return reshape(conv2d(flat, kernel, stride=1, padding=size // 2), (n, c, h, w))


def linear(x, weight, bias=None) -> Tensor:
    from .tensor import add, matmul, transpose

    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def sinusoidal_time_embed(t: int, dim: int, T: int) -> np.ndarray:
    """Interleaved [sin, cos] features of step ``t`` at geometric frequencies.

    Frequencies run from 1 down to 1/10000 across the ``dim // 2`` pairs.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"time embedding dim must be a positive even integer, got {dim}")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    phase = float(t) * freqs
    out = np.empty(dim)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out
