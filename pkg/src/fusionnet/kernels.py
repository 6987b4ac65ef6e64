"""Batched NHWC forward/backward kernels on float64 numpy arrays.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _pad(x, kernel, strides, padding, value=0.0):
    if padding == "valid":
        return x, (0, 0, 0, 0)
    pt, pb = same_padding(x.shape[1], kernel[0], strides[0])
    pl, pr = same_padding(x.shape[2], kernel[1], strides[1])
    if pt == pb == pl == pr == 0:
        return x, (0, 0, 0, 0)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)
    return xp, (pt, pb, pl, pr)


def _windows(xp, kernel, strides):
    """(N, Ho, Wo, C, kh, kw) strided view over a padded input."""
    kh, kw = kernel
    sh, sw = strides
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    view = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return view[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter(dwin, xp_shape, kernel, strides):
    """Adjoint of :func:`_windows`: accumulate (N, Ho, Wo, C, kh, kw) into the padded input."""
    kh, kw = kernel
    sh, sw = strides
    _, ho, wo = dwin.shape[:3]
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw, :] += dwin[..., i, j]
    return dxp


def _crop(dxp, pads):
    pt, pb, pl, pr = pads
    return dxp[:, pt : dxp.shape[1] - pb, pl : dxp.shape[2] - pr, :]


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, kernel, bias, strides, padding):
    kh, kw, cin, f = kernel.shape
    if kh == kw == 1 and strides == (1, 1):
        n, h, w, _ = x.shape
        cols = x.reshape(-1, cin)
        y = cols @ kernel.reshape(cin, f)
        out_shape = (n, h, w, f)
        cache = ("pointwise", x.shape, cols)
    else:
        xp, pads = _pad(x, (kh, kw), strides, padding)
        win = _windows(xp, (kh, kw), strides)
        n, ho, wo = win.shape[:3]
        cols = win.reshape(n * ho * wo, cin * kh * kw)
        wmat = kernel.transpose(2, 0, 1, 3).reshape(cin * kh * kw, f)
        y = cols @ wmat
        out_shape = (n, ho, wo, f)
        cache = ("im2col", xp.shape, pads, cols, (kh, kw), strides, win.shape)
    if bias is not None:
        y += bias
    return y.reshape(out_shape), (cache, kernel, bias is not None)


def conv2d_backward(dy, cache):
    info, kernel, has_bias = cache
    kh, kw, cin, f = kernel.shape
    dy2 = dy.reshape(-1, f)
    db = dy2.sum(axis=0) if has_bias else None
    if info[0] == "pointwise":
        _, x_shape, cols = info
        wmat = kernel.reshape(cin, f)
        dk = (cols.T @ dy2).reshape(kernel.shape)
        dx = (dy2 @ wmat.T).reshape(x_shape)
        return dx, dk, db
    _, xp_shape, pads, cols, k, strides, win_shape = info
    wmat = kernel.transpose(2, 0, 1, 3).reshape(cin * kh * kw, f)
    dk = (cols.T @ dy2).reshape(cin, kh, kw, f).transpose(1, 2, 0, 3)
    dwin = (dy2 @ wmat.T).reshape(win_shape)
    dx = _crop(_scatter(dwin, xp_shape, k, strides), pads)
    return dx, np.ascontiguousarray(dk), db


# --------------------------------------------------------------------------
# pooling


def maxpool_forward(x, pool, strides, padding):
    xp, pads = _pad(x, pool, strides, padding, value=-np.inf)
    win = _windows(xp, pool, strides)
    flat = win.reshape(win.shape[:4] + (-1,))
    idx = flat.argmax(axis=-1)  # first maximum in row-major window order
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, xp.shape, pads, pool, strides)


def maxpool_backward(dy, cache):
    idx, xp_shape, pads, pool, strides = cache
    ph, pw = pool
    dwin = np.zeros(dy.shape + (ph, pw))
    for i in range(ph):
        for j in range(pw):
            dwin[..., i, j] = np.where(idx == i * pw + j, dy, 0.0)
    return _crop(_scatter(dwin, xp_shape, pool, strides), pads)


def avgpool_forward(x, pool, strides, padding):
    xp, pads = _pad(x, pool, strides, padding)
    ones, _ = _pad(np.ones((1,) + x.shape[1:3] + (1,)), pool, strides, padding)
    counts = _windows(ones, pool, strides).sum(axis=(-1, -2))
    y = _windows(xp, pool, strides).sum(axis=(-1, -2)) / counts
    return y, (counts, xp.shape, pads, pool, strides)


def avgpool_backward(dy, cache):
    counts, xp_shape, pads, pool, strides = cache
    g = dy / counts
    dwin = np.broadcast_to(g[..., None, None], g.shape + tuple(pool))
    return _crop(_scatter(dwin, xp_shape, pool, strides), pads)


# --------------------------------------------------------------------------
# normalization and the rest


def batchnorm_forward(x, gamma, beta, mean, var, eps, training):
    axes = tuple(range(x.ndim - 1))
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    scale = gamma if gamma is not None else 1.0
    y = xhat * scale + beta
    return y, (xhat, inv_std, gamma, training, mean, var)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, training, _, _ = cache
    axes = tuple(range(dy.ndim - 1))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes) if gamma is not None else None
    dxhat = dy * gamma if gamma is not None else dy
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dy, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to((dy / (h * w))[:, None, None, :], x_shape).copy()


def dense_forward(x, kernel, bias):
    y = x @ kernel
    if bias is not None:
        y = y + bias
    return y, (x, kernel, bias is not None)


def dense_backward(dy, cache):
    x, kernel, has_bias = cache
    return dy @ kernel.T, x.T @ dy, (dy.sum(axis=0) if has_bias else None)


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, probs):
    return probs * (dy - (dy * probs).sum(axis=-1, keepdims=True))
