"""Dense CPU kernels for the layer set, with hand-written backward passes.

All functions take and return NCHW arrays and preserve the input float dtype,
so the same code runs the f32 engine and the f64 gradient checks.  Forward
variants used in training return an opaque cache consumed by the matching
backward function.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patches of x as a (N*oh*ow, C*kh*kw) matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow):
    """Scatter-add column gradients back onto the (padded) input."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        hi = i + stride * oh
        for j in range(kw):
            wj = j + stride * ow
            dxp[:, :, i:hi:stride, j:wj:stride] += d[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"conv input has {x.shape[1]} channels, weight expects {ci}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(co, -1).T
    return y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


def conv2d_fwd(x, w, stride=1, pad=0):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"conv input has {x.shape[1]} channels, weight expects {ci}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(co, -1).T
    cache = (cols, x.shape, w, stride, pad, oh, ow)
    return y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2), cache


def conv2d_bwd(dy, cache):
    """Returns (dx, dw)."""
    cols, x_shape, w, stride, pad, oh, ow = cache
    co, ci, kh, kw = w.shape
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1).reshape(-1, co))
    dw = (dy_mat.T @ cols).reshape(w.shape)
    dcols = dy_mat @ w.reshape(co, -1)
    dx = _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow)
    return dx, dw


def batchnorm_infer(x, gamma, beta, mean, var, eps=BN_EPS):
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    return x * scale[:, None, None] + shift[:, None, None]


def batchnorm_fwd(x, gamma, beta, eps=BN_EPS):
    """Training-mode forward on batch statistics.

    Returns (y, cache, batch_mean, batch_var_unbiased); the unbiased variance
    feeds the running-statistics update, normalization uses the biased one.
    """
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=axes)
    xc = x - mu[None, :, None, None]
    var = np.mean(xc * xc, axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = ("train", xhat, gamma, inv_std, n)
    var_unbiased = var * (n / (n - 1)) if n > 1 else var
    return y, cache, mu, var_unbiased


def batchnorm_frozen_fwd(x, gamma, beta, mean, var, eps=BN_EPS):
    """Inference-mode forward that still returns a backward cache.

    Used for frozen blocks inside a training graph: the layer is then a fixed
    per-channel affine map, so only dx is defined on the way back.
    """
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    y = x * scale[:, None, None] + shift[:, None, None]
    return y, ("frozen", scale)


def batchnorm_bwd(dy, cache):
    """Returns (dx, dgamma, dbeta); the frozen variant yields (dx, None, None)."""
    if cache[0] == "frozen":
        scale = cache[1]
        return dy * scale[None, :, None, None], None, None
    _, xhat, gamma, inv_std, n = cache
    axes = (0, 2, 3)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    g = gamma * inv_std
    dx = g[None, :, None, None] * (
        dy
        - (dbeta / n)[None, :, None, None]
        - xhat * (dgamma / n)[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(dy, mask):
    return dy * mask


def maxpool(x, kernel=3, stride=2, pad=1):
    y, _ = maxpool_fwd(x, kernel, stride, pad)
    return y


def maxpool_fwd(x, kernel=3, stride=2, pad=1):
    n, c, h, w = x.shape
    neg = np.array(-np.inf, dtype=x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=neg)
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (x.shape, arg, kernel, stride, pad, oh, ow)
    return y, cache


def maxpool_bwd(dy, cache):
    x_shape, arg, kernel, stride, pad, oh, ow = cache
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    ni, ci, ii, ji = np.indices((n, c, oh, ow), sparse=False)
    ph = ii * stride + arg // kernel
    pw = ji * stride + arg % kernel
    np.add.at(dxp, (ni, ci, ph, pw), dy)
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def gap_bwd(dy, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None], x_shape) / (h * w)


def affine(x, w, b):
    """x: (N, features); w: (classes, features); b: (classes,)."""
    return x @ w.T + b


def affine_bwd(dy, x, w):
    """Returns (dx, dw, db)."""
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over the batch.

    Returns (loss, probs, dlogits) where dlogits is the exact gradient of the
    mean loss with respect to the logits: (softmax - onehot) / N.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits
