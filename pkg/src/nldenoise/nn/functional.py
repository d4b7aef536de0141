"""Layer primitives on (N, C, H, W) arrays.

Every forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache. Ops keep the input dtype, so the same code
runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (N,C,H,W), got shape {x.shape}")


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x, w, b=None, stride=1, pad_same=True):
    """Cross-correlation with zero padding ``k // 2`` when ``pad_same``."""
    _check4(x)
    _check4(w, "w")
    N, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel expects {Ci}")
    if kh != kw:
        raise ValueError("only square kernels are supported")
    k = kh
    p = k // 2 if pad_same else 0
    Ho, Wo = _out_size(H, k, stride, p), _out_size(W, k, stride, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    wmat = w.reshape(Co, -1)
    y = cols @ wmat.T
    if b is not None:
        y += b
    out = np.ascontiguousarray(y.reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w, stride, p, b is not None)


def conv2d_backward(dy, cache):
    cols, xshape, w, stride, p, has_bias = cache
    N, C, H, W = xshape
    Co, _, k, _ = w.shape
    _, _, Ho, Wo = dy.shape
    dymat = dy.transpose(0, 2, 3, 1).reshape(-1, Co)
    dw = (dymat.T @ cols).reshape(w.shape)
    db = dymat.sum(axis=0) if has_bias else None
    dcols = (dymat @ w.reshape(Co, -1)).reshape(N, Ho, Wo, C, k, k)
    dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride] += (
                dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
    return np.ascontiguousarray(dx), dw, db


def depthwise_conv2d(x, w, stride=1, pad_same=True):
    """Per-channel 3x3 cross-correlation; ``w`` has shape (C, 1, k, k)."""
    _check4(x)
    N, C, H, W = x.shape
    if w.shape[0] != C or w.shape[1] != 1:
        raise ValueError(f"depthwise kernel {w.shape} does not match {C} channels")
    k = w.shape[2]
    p = k // 2 if pad_same else 0
    Ho, Wo = _out_size(H, k, stride, p), _out_size(W, k, stride, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            tap = xp[:, :, ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride]
            out += w[:, 0, ky, kx][None, :, None, None] * tap
    return out, (xp, x.shape, w, stride, p)


def depthwise_conv2d_backward(dy, cache):
    xp, xshape, w, stride, p = cache
    N, C, H, W = xshape
    k = w.shape[2]
    _, _, Ho, Wo = dy.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for ky in range(k):
        for kx in range(k):
            sl = (slice(None), slice(None),
                  slice(ky, ky + stride * (Ho - 1) + 1, stride),
                  slice(kx, kx + stride * (Wo - 1) + 1, stride))
            dw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", dy, xp[sl])
            dxp[sl] += w[:, 0, ky, kx][None, :, None, None] * dy
    dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
    return np.ascontiguousarray(dx), dw


def dwsep_conv(x, w_depth, w_point, b=None, stride=1):
    """Depthwise 3x3 (carrying the stride) followed by a biased 1x1 conv."""
    h, c1 = depthwise_conv2d(x, w_depth, stride=stride)
    y, c2 = conv2d(h, w_point, b, stride=1, pad_same=False)
    return y, (c1, c2)


def dwsep_conv_backward(dy, cache):
    c1, c2 = cache
    dh, dwp, db = conv2d_backward(dy, c2)
    dx, dwd = depthwise_conv2d_backward(dh, c1)
    return dx, dwd, dwp, db


def deconv2x2(x, w, b=None):
    """Transposed 2x2 convolution with stride 2; ``w`` has shape (Cin, Cout, 2, 2)."""
    _check4(x)
    N, C, H, W = x.shape
    if w.shape[0] != C or w.shape[2:] != (2, 2):
        raise ValueError(f"deconv kernel {w.shape} does not match {C} input channels")
    Co = w.shape[1]
    xm = x.transpose(0, 2, 3, 1).reshape(-1, C)
    y = (xm @ w.reshape(C, Co * 4)).reshape(N, H, W, Co, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(N, Co, 2 * H, 2 * W)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (xm, x.shape, w, b is not None)


def deconv2x2_backward(dy, cache):
    xm, xshape, w, has_bias = cache
    N, C, H, W = xshape
    Co = w.shape[1]
    dm = dy.reshape(N, Co, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Co * 4)
    dw = (xm.T @ dm).reshape(w.shape)
    dx = (dm @ w.reshape(C, Co * 4).T).reshape(N, H, W, C).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Returns ``(out, cache, (new_mean, new_var))``; running stats are not mutated."""
    _check4(x)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_stats = (
            (momentum * running_mean + (1 - momentum) * mean).astype(running_mean.dtype),
            (momentum * running_var + (1 - momentum) * var).astype(running_var.dtype),
        )
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype), (xhat, inv, gamma, training), new_stats


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, training = cache
    dgamma = np.einsum("nchw,nchw->c", dy, xhat)
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if training:
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
        )
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx.astype(dy.dtype), dgamma, dbeta


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def concat_channels(*xs):
    if not xs:
        raise ValueError("nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape}")
    return np.concatenate(xs, axis=1), [t.shape[1] for t in xs]


def concat_backward(dy, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def l1_loss(pred, target):
    """Mean absolute error and its (sub)gradient; sign(0) is taken as 0."""
    diff = pred - target
    n = diff.size
    loss = float(np.abs(diff).astype(np.float64).sum() / n)
    return loss, (np.sign(diff) / n).astype(pred.dtype)
