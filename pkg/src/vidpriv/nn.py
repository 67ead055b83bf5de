"""Low-level network primitives with explicit forward/backward passes.

All layers are pure functions operating on channels-last float arrays.
Forward passes return ``(output, cache)``; the matching backward pass
consumes the cache and the upstream gradient and returns input and weight
gradients. Convolutions use symmetric "same" padding (odd kernels only),
implemented via sliding-window views plus a single tensordot so the heavy
lifting lands in BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "he_normal",
    "conv2d_forward",
    "conv2d_backward",
    "conv3d_forward",
    "conv3d_backward",
    "dense_forward",
    "dense_backward",
    "relu_forward",
    "relu_backward",
    "hardsig_forward",
    "hardsig_backward",
    "mean_pool_forward",
    "mean_pool_backward",
]

# Hard sigmoid: y = clip(HS_SLOPE * t + 0.5, 0, 1). The linear segment spans
# t in [-2.5, 2.5], which is what lets a hand-set head reproduce the identity
# map exactly (a smooth sigmoid could only approximate it).
HS_SLOPE = 0.2


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal draw with variance 2/fan_in (drawn in float64, then cast)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def _pad_same_2d(x: np.ndarray, kw: int, kh: int) -> np.ndarray:
    pw, ph = kw // 2, kh // 2
    return np.pad(x, ((0, 0), (pw, pw), (ph, ph), (0, 0)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """2D convolution over [N, W, H, C] input with kernel [kw, kh, Cin, Cout]."""
    kw, kh, cin, cout = w.shape
    if kw % 2 == 0 or kh % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    xp = _pad_same_2d(x, kw, kh)
    win = sliding_window_view(xp, (kw, kh), axis=(1, 2))[:, ::stride, ::stride]
    # win: [N, Wo, Ho, C, kw, kh]
    y = np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2])) + b
    y = y.astype(x.dtype, copy=False)
    cache = (x.shape, xp, win, w, stride)
    return y, cache


def conv2d_backward(cache, dy: np.ndarray):
    x_shape, xp, win, w, stride = cache
    kw, kh, cin, cout = w.shape
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # [C, kw, kh, Cout]
    dw = np.ascontiguousarray(dw.transpose(1, 2, 0, 3))
    db = dy.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    _, wo, ho, _ = dy.shape
    for a in range(kw):
        for c in range(kh):
            t = np.tensordot(dy, w[a, c], axes=([3], [1]))  # [N, Wo, Ho, Cin]
            dxp[:, a : a + stride * wo : stride, c : c + stride * ho : stride, :] += t
    pw, ph = kw // 2, kh // 2
    dx = dxp[:, pw : pw + x_shape[1], ph : ph + x_shape[2], :]
    return dx, dw.astype(dy.dtype, copy=False), db


def _pad_same_3d(x: np.ndarray, kt: int, kw: int, kh: int) -> np.ndarray:
    pt, pw, ph = kt // 2, kw // 2, kh // 2
    return np.pad(x, ((0, 0), (pt, pt), (pw, pw), (ph, ph), (0, 0)))


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride=(1, 1, 1)):
    """3D convolution over [N, T, W, H, C] input with kernel [kt, kw, kh, Cin, Cout]."""
    kt, kw, kh, cin, cout = w.shape
    if kt % 2 == 0 or kw % 2 == 0 or kh % 2 == 0:
        raise ValueError("conv3d requires odd kernel sizes")
    if x.shape[-1] != cin:
        raise ValueError(f"conv3d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    st, sw, sh = stride
    xp = _pad_same_3d(x, kt, kw, kh)
    win = sliding_window_view(xp, (kt, kw, kh), axis=(1, 2, 3))[:, ::st, ::sw, ::sh]
    # win: [N, To, Wo, Ho, C, kt, kw, kh]
    y = np.tensordot(win, w, axes=([5, 6, 7, 4], [0, 1, 2, 3])) + b
    y = y.astype(x.dtype, copy=False)
    cache = (x.shape, xp, win, w, stride)
    return y, cache


def conv3d_backward(cache, dy: np.ndarray):
    x_shape, xp, win, w, stride = cache
    kt, kw, kh, cin, cout = w.shape
    st, sw, sh = stride
    dw = np.tensordot(win, dy, axes=([0, 1, 2, 3], [0, 1, 2, 3]))  # [C, kt, kw, kh, Cout]
    dw = np.ascontiguousarray(dw.transpose(1, 2, 3, 0, 4))
    db = dy.sum(axis=(0, 1, 2, 3))
    dxp = np.zeros_like(xp)
    _, to, wo, ho, _ = dy.shape
    for a in range(kt):
        for c in range(kw):
            for d in range(kh):
                t = np.tensordot(dy, w[a, c, d], axes=([4], [1]))
                dxp[
                    :,
                    a : a + st * to : st,
                    c : c + sw * wo : sw,
                    d : d + sh * ho : sh,
                    :,
                ] += t
    pt, pw, ph = kt // 2, kw // 2, kh // 2
    dx = dxp[:, pt : pt + x_shape[1], pw : pw + x_shape[2], ph : ph + x_shape[3], :]
    return dx, dw.astype(dy.dtype, copy=False), db


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    y = x @ w + b
    return y, (x, w)


def dense_backward(cache, dy: np.ndarray):
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(cache, dy: np.ndarray):
    return dy * (cache > 0)


def hardsig_forward(x: np.ndarray):
    t = HS_SLOPE * x + 0.5
    y = np.clip(t, 0.0, 1.0).astype(x.dtype, copy=False)
    return y, t


def hardsig_backward(cache, dy: np.ndarray):
    t = cache
    interior = (t > 0.0) & (t < 1.0)
    return dy * (HS_SLOPE * interior).astype(dy.dtype, copy=False)


def mean_pool_forward(x: np.ndarray, axes: tuple):
    return x.mean(axis=axes), (x.shape, axes)


def mean_pool_backward(cache, dy: np.ndarray):
    x_shape, axes = cache
    n = 1
    for ax in axes:
        n *= x_shape[ax]
    dyx = np.expand_dims(dy, axes)
    return np.broadcast_to(dyx / n, x_shape).astype(dy.dtype, copy=False)
