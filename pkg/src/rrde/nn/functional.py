"""Forward/backward pairs for the layers used by the pipeline.

Every forward returns ``(out, cache)``; the matching backward consumes the
cache and the upstream gradient.  The network runs channels-last (NHWC)
internally; ``conv2d_forward``/``batch_norm_forward`` default to NCHW.
Everything is dtype-preserving.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, pad, channels_axis):
    if len(x_shape) != 4 or len(w_shape) != 4 or x_shape[channels_axis] != w_shape[1]:
        raise ShapeError(f"conv2d: input shape {tuple(x_shape)} incompatible with weights shape {tuple(w_shape)}")
    h, w = (x_shape[1], x_shape[2]) if channels_axis == 3 else (x_shape[2], x_shape[3])
    kh, kw = w_shape[2:]
    if stride < 1 or pad < 0 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: input shape {tuple(x_shape)} too small for weights shape "
                         f"{tuple(w_shape)} with stride={stride}, pad={pad}")


def _patches(xp, kh, kw, stride, ho, wo):
    """(N*Ho*Wo, kh*kw*C) patch matrix of a padded NHWC array, row-major (kh, kw, C).

    In NHWC the kw*C values of one patch row are contiguous, so a strided
    view with a (kh, kw*C) tail describes every patch without copying.
    """
    xp = np.ascontiguousarray(xp)
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw * c), (s0, s1 * stride, s2 * stride, s1, s3),
                      writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, kh * kw * c)


def conv2d_nhwc_forward(x, w, stride=1, pad=0):
    """Cross-correlation of channels-last ``x`` (N, H, W, C) with ``w`` (out, in, kh, kw).

    Patches are gathered into one (N*Ho*Wo, kh*kw*C) matrix and multiplied
    once by the reshaped kernel.
    """
    _check_conv(x.shape, w.shape, stride, pad, 3)
    n, h, wd, c = x.shape
    out_ch, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _patches(xp, kh, kw, stride, ho, wo)
    wmat = w.transpose(2, 3, 1, 0).reshape(-1, out_ch)
    out = (cols @ wmat).reshape(n, ho, wo, out_ch)
    return out, (cols, x.shape, w, stride, pad, ho, wo)


def conv2d_nhwc_backward(dout, cache):
    """Gradients ``(dx, dw)``.

    ``dw`` is the transposed patch product.  ``dx`` is itself a stride-1
    correlation of the zero-dilated, padded ``dout`` with the spatially
    flipped, channel-transposed kernel.
    """
    cols, x_shape, w, stride, pad, ho, wo = cache
    out_ch, c, kh, kw = w.shape
    n, h, wd, _ = x_shape
    d2 = dout.reshape(-1, out_ch)
    dw = (cols.T @ d2).reshape(kh, kw, c, out_ch).transpose(3, 2, 0, 1)
    left_h, left_w = kh - 1 - pad, kw - 1 - pad
    dil_h, dil_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    right_h, right_w = h + kh - 1 - left_h - dil_h, wd + kw - 1 - left_w - dil_w
    if min(left_h, left_w) < 0:
        raise ShapeError(f"conv2d backward needs pad <= kernel-1, got pad={pad} for {w.shape}")
    grown = np.zeros((n, h + kh - 1 + max(-right_h, 0), wd + kw - 1 + max(-right_w, 0), out_ch),
                     dtype=dout.dtype)
    grown[:, left_h:left_h + dil_h:stride, left_w:left_w + dil_w:stride, :] = dout
    grown = grown[:, :h + kh - 1, :wd + kw - 1]
    w_t = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = (_patches(grown, kh, kw, 1, h, wd) @ w_t.transpose(2, 3, 1, 0).reshape(-1, c)).reshape(n, h, wd, c)
    return dx, np.ascontiguousarray(dw)


def conv2d_forward(x, w, stride=1, pad=0):
    """NCHW convenience wrapper over the channels-last kernel."""
    _check_conv(x.shape, w.shape, stride, pad, 1)
    out, cache = conv2d_nhwc_forward(x.transpose(0, 2, 3, 1), w, stride, pad)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(dout, cache):
    dx, dw = conv2d_nhwc_backward(np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), cache)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw


def conv2d(x, w, stride=1, pad=0):
    return conv2d_forward(x, w, stride, pad)[0]


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train,
                       momentum=BN_MOMENTUM, eps=BN_EPS, channel_axis=1):
    """Per-channel batch norm; statistics over every axis but ``channel_axis``.

    In train mode ``running_mean``/``running_var`` are updated in place
    (``running = momentum * running + (1 - momentum) * batch``).  Eval mode
    touches no state.
    """
    channel_axis %= x.ndim
    c = x.shape[channel_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} vs {c} channels in {x.shape}")
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    bshape = tuple(c if a == channel_axis else 1 for a in range(x.ndim))
    if train:
        mean = x.mean(axis=axes)
        centered = x - mean.reshape(bshape)
        var = np.mean(centered * centered, axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        centered = x - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, axes, bshape, train)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, axes, bshape, train = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    scale = (gamma * inv_std).reshape(bshape)
    if not train:
        return dout * scale, dgamma, dbeta
    m = dout.size // gamma.size
    dx = scale * (dout - (dbeta / m).reshape(bshape) - xhat * (dgamma / m).reshape(bshape))
    return dx, dgamma, dbeta


def dense_forward(x, w, b):
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weights {w.shape} / bias {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(dout, mask):
    return dout * mask


def global_avg_pool_forward(x):
    """Mean over the spatial axes of an NHWC tensor."""
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, shape):
    n, h, w, c = shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), shape).copy()
