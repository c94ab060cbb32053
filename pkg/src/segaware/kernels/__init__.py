"""Convolution kernels with a compiled fast path.

The compiled Cython/AVX core is used when it imported cleanly; otherwise
a pure-numpy im2col backend. Selection can be forced with the environment
variable ``SEGAWARE_BACKEND=cython|numpy``.

Conventions: activations are (B, H, W, C) C-contiguous; weights are
(3, 3, C_in, C_out); all 3x3 kernels use zero ("same") padding, so the
spatial output size is ceil(H / stride) x ceil(W / stride).

The input gradient is not a separate kernel: for stride 1 it equals a
forward convolution of dy with flipped/transposed weights, and for
stride 2 the same holds after zero-dilating dy back to the input grid.
"""
from __future__ import annotations

import os
import threading

import numpy as np

from . import numpy_backend

try:
    from . import _cykernels

    _HAVE_CYTHON = True
except ImportError:
    _cykernels = None
    _HAVE_CYTHON = False

_env = os.environ.get("SEGAWARE_BACKEND", "auto").lower()
if _env == "numpy":
    _ACTIVE = "numpy"
elif _env == "cython":
    if not _HAVE_CYTHON:
        raise ImportError(
            "SEGAWARE_BACKEND=cython requested but the compiled core is unavailable"
        )
    _ACTIVE = "cython"
else:
    _ACTIVE = "cython" if _HAVE_CYTHON else "numpy"

_local = threading.local()


def backend_name() -> str:
    return _ACTIVE


def available_backends() -> tuple[str, ...]:
    return ("cython", "numpy") if _HAVE_CYTHON else ("numpy",)


def out_hw(h: int, w: int, stride: int) -> tuple[int, int]:
    return (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1


def _zeros_pool(key, shape, dtype):
    pool = getattr(_local, "zpool", None)
    if pool is None:
        pool = _local.zpool = {}
    buf = pool.get(key)
    if buf is None or buf.shape != shape or buf.dtype != dtype:
        buf = pool[key] = np.zeros(shape, dtype)
    return buf


def conv2d_forward(x, w, b=None, stride=1, relu=False, out=None, backend=None):
    """y = conv3x3(x, w) + b, optionally fused with ReLU."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    o = w.shape[3]
    if b is None:
        b = np.zeros(o, x.dtype)
    else:
        b = np.ascontiguousarray(b, dtype=x.dtype)
    name = backend or _ACTIVE
    if name == "numpy":
        return numpy_backend.conv3x3_forward(x, w, b, stride, relu, out)
    bsz, h, width, _ = x.shape
    ho, wo = out_hw(h, width, stride)
    if out is None:
        out = np.empty((bsz, ho, wo, o), x.dtype)
    wt = w
    if x.dtype == np.float32 and o < 16 and w.shape[2] >= 16:
        wt = np.ascontiguousarray(w.transpose(0, 1, 3, 2))
    _cykernels.conv3x3_forward(x, w, wt, b, out, stride, relu)
    return out


def _flip_transpose(w):
    return np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))


def conv2d_backward_input(dy, w, stride=1, in_hw=None, out=None, backend=None):
    """Gradient w.r.t. the convolution input.

    in_hw gives the input spatial size (required for stride 2, where it
    is not recoverable from dy alone when H or W is odd).
    """
    dy = np.ascontiguousarray(dy)
    wq = _flip_transpose(np.asarray(w, dy.dtype))
    if stride == 1:
        return conv2d_forward(dy, wq, None, 1, False, out, backend)
    if stride != 2:
        raise ValueError(f"unsupported stride {stride}")
    if in_hw is None:
        raise ValueError("in_hw is required for stride-2 backward")
    h, width = in_hw
    bsz, ho, wo, o = dy.shape
    dil = _zeros_pool(("dilate", dy.dtype, bsz, h, width, o),
                      (bsz, h, width, o), dy.dtype)
    dil[:, : 2 * ho : 2, : 2 * wo : 2, :] = dy
    return conv2d_forward(dil, wq, None, 1, False, out, backend)


def conv2d_backward_weights(x, dy, stride=1, backend=None):
    """Gradients (dw, db) of a 3x3 convolution's weights and bias."""
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    db = dy.sum(axis=(0, 1, 2))
    name = backend or _ACTIVE
    if name == "numpy":
        return numpy_backend.conv3x3_grad_weights(x, dy, stride), db
    c, o = x.shape[3], dy.shape[3]
    nt = _cykernels.omp_max_threads()
    part = np.zeros((nt, 3, 3, c, o), x.dtype)
    _cykernels.conv3x3_grad_weights(x, dy, part, stride)
    return part.sum(axis=0), db


def relu_backward(dy, y, out=None, backend=None):
    """Mask dy by the ReLU activation pattern of y (post-activation)."""
    name = backend or _ACTIVE
    if name == "numpy":
        return numpy_backend.relu_backward(dy, y, out)
    if out is None:
        out = np.empty_like(dy)
    _cykernels.relu_backward(dy.reshape(-1), y.reshape(-1), out.reshape(-1))
    return out
