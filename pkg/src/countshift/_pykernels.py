"""Pure numpy implementation of the convolution kernels.

Same contract as the compiled ``_ckernels`` module: inputs are pre-padded
float64 arrays, samples are handled one at a time in batch order, and samples
whose upstream gradient is identically zero are skipped.
"""

import numpy as np


def _unfold(xp, kh, kw, stride, dilation, ho, wo):
    """Column matrix of shape (C*kh*kw, ho*wo) for one padded sample (C, Hp, Wp)."""
    channels = xp.shape[0]
    cols = np.empty((channels, kh, kw, ho, wo))
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xp[:, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(channels * kh * kw, ho * wo)


def _fold(cols, shape, kh, kw, stride, dilation, ho, wo):
    channels, hp, wp = shape
    cols = cols.reshape(channels, kh, kw, ho, wo)
    dxp = np.zeros(shape)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return dxp


def conv2d_forward(xp, weight, bias, stride, dilation, ho, wo, relu=False):
    n_batch = xp.shape[0]
    k_out, _, kh, kw = weight.shape
    wmat = weight.reshape(k_out, -1)
    out = np.empty((n_batch, k_out, ho, wo))
    for n in range(n_batch):
        cols = _unfold(xp[n], kh, kw, stride, dilation, ho, wo)
        out[n] = (wmat @ cols).reshape(k_out, ho, wo) + bias[:, None, None]
    if relu:
        out = np.where(out > 0, out, 0.0)
    return out


def conv2d_backward(xp, weight, gout, stride, dilation, need_dx, out=None):
    n_batch = xp.shape[0]
    k_out, channels, kh, kw = weight.shape
    ho, wo = gout.shape[2], gout.shape[3]
    wmat = weight.reshape(k_out, -1)
    dw = np.zeros((k_out, channels * kh * kw))
    db = np.zeros(k_out)
    dxp = np.zeros(xp.shape) if need_dx else None
    if out is not None:
        gout = np.where(out > 0, gout, 0.0)
    for n in range(n_batch):
        g = gout[n].reshape(k_out, ho * wo)
        if not g.any():
            continue
        db += g.sum(axis=1)
        cols = _unfold(xp[n], kh, kw, stride, dilation, ho, wo)
        dw += g @ cols.T
        if need_dx:
            dxp[n] = _fold(wmat.T @ g, xp.shape[1:], kh, kw, stride, dilation, ho, wo)
    return dxp, dw.reshape(weight.shape), db


def avgpool2_forward(x):
    """Non-overlapping 2x2 means of a contiguous (N, C, H, W) array with even H and W."""
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return (v[:, :, :, 0, :, 0] + v[:, :, :, 0, :, 1] + v[:, :, :, 1, :, 0] + v[:, :, :, 1, :, 1]) * 0.25


def avgpool2_backward(g):
    """Spread each pooled gradient cell, times 1/4, over its 2x2 window."""
    n, c, h, w = g.shape
    out = np.empty((n, c, 2 * h, 2 * w))
    out.reshape(n, c, h, 2, w, 2)[...] = (g * 0.25)[:, :, :, None, :, None]
    return out
