"""Pure-numpy convolution backend.

Same primitive surface as the compiled core: 3x3 same-padding convolution
via im2col + BLAS matmul. Workspace arrays are pooled per thread because
repeatedly mmap-allocating the ~tens-of-MB im2col buffers costs more in
page faults than the matmul itself.
"""
from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _workspace(key, shape, dtype):
    pool = getattr(_local, "pool", None)
    if pool is None:
        pool = _local.pool = {}
    buf = pool.get(key)
    if buf is None or buf.shape != shape or buf.dtype != dtype:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _out_hw(h, w, stride):
    return (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1


def _im2col(x, stride):
    """Columns of 3x3 windows: (B, Ho, Wo, 9, C), zero-padded borders."""
    b, h, w, c = x.shape
    ho, wo = _out_hw(h, w, stride)
    xp = _workspace(("pad", x.dtype), (b, h + 2, w + 2, c), x.dtype)
    xp[:, 0, :, :] = 0
    xp[:, -1, :, :] = 0
    xp[:, :, 0, :] = 0
    xp[:, :, -1, :] = 0
    xp[:, 1:-1, 1:-1, :] = x
    cols = _workspace(("cols", stride, x.dtype), (b, ho, wo, 9, c), x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, :, :, kh * 3 + kw, :] = xp[
                :, kh : kh + (ho - 1) * stride + 1 : stride,
                kw : kw + (wo - 1) * stride + 1 : stride, :,
            ]
    return cols


def conv3x3_forward(x, w, b, stride=1, relu=False, out=None):
    bsz, h, width, c = x.shape
    o = w.shape[3]
    ho, wo = _out_hw(h, width, stride)
    cols = _im2col(x, stride)
    flat = cols.reshape(-1, 9 * c) @ w.reshape(9 * c, o)
    flat += b
    y = flat.reshape(bsz, ho, wo, o)
    if relu:
        np.maximum(y, 0, out=y)
    if out is not None:
        out[...] = y
        return out
    return y


def conv3x3_grad_weights(x, dy, stride=1):
    c = x.shape[3]
    o = dy.shape[3]
    cols = _im2col(x, stride)
    dw = cols.reshape(-1, 9 * c).T @ dy.reshape(-1, o)
    return dw.reshape(3, 3, c, o)


def relu_backward(dy, y, out=None):
    if out is None:
        out = np.empty_like(dy)
    np.multiply(dy, y > 0, out=out)
    return out
