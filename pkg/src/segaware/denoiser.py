"""Residual convolutional denoiser.

A plain stack of 3x3 same-padding convolutions with ReLU between them
(no batch norm) predicts the noise field R(x); the output is x - R(x),
so an all-zero network is exactly the identity. Weights are stored as
(3, 3, c_in, c_out), activations as (B, H, W, C) float32 for training
and float64 for the finite-difference oracle paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class ConvLayer:
    w: np.ndarray  # (3, 3, c_in, c_out)
    b: np.ndarray  # (c_out,)


@dataclass
class DenoiserParams:
    layers: list[ConvLayer] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> int:
        return self.layers[0].w.shape[2]

    @property
    def width(self) -> int:
        return self.layers[0].w.shape[3]

    def n_parameters(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)


def init_denoiser(depth, width, channels=3, seed=0, dtype=np.float32):
    """He-initialized residual denoiser: kernels ~ N(0, 2/(9*fan_in)), biases 0."""
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    rng = np.random.default_rng((seed, 0xD))
    dims = [channels] + [width] * (depth - 1) + [channels]
    layers = []
    for cin, cout in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (9 * cin))
        w = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)
        layers.append(ConvLayer(w, np.zeros(cout, dtype)))
    return DenoiserParams(layers)


def forward_batch(params, x, keep_cache=False, linear=False, pool=None):
    """Denoise a batch: returns (x - R(x), cache-or-None).

    The cache holds each conv layer's input (post-activation), which is
    exactly what the backward pass needs. `linear` swaps ReLU for the
    identity (affinity probe used in tests).
    """
    take = pool.take if pool is not None else (lambda k, s, d: np.empty(s, d))
    d = params.depth
    a = x
    cache = [x] if keep_cache else None
    for l, layer in enumerate(params.layers[:-1]):
        out = take(("den_a", l), a.shape[:3] + (layer.w.shape[3],), a.dtype)
        a = kernels.conv2d_forward(a, layer.w, layer.b, relu=not linear, out=out)
        if keep_cache:
            cache.append(a)
    last = params.layers[-1]
    r = take(("den_r", d - 1), a.shape[:3] + (last.w.shape[3],), a.dtype)
    r = kernels.conv2d_forward(a, last.w, last.b, out=r)
    y = take(("den_y", 0), x.shape, x.dtype)
    np.subtract(x, r, out=y)
    return y, cache


def backward_batch(params, cache, dldy, need_input_grad=False, linear=False, pool=None):
    """Parameter gradients of a scalar loss through the residual forward.

    dldy is dL/d(output). Returns (grads, dldx) where grads is a list of
    (dw, db) matching params.layers, and dldx is dL/d(input) or None.
    """
    take = pool.take if pool is not None else (lambda k, s, d: np.empty(s, d))
    d = take(("den_dr", 0), dldy.shape, dldy.dtype)
    np.negative(dldy, out=d)  # gradient w.r.t. the residual branch output
    grads = [None] * params.depth
    for l in range(params.depth - 1, -1, -1):
        a_l = cache[l]
        grads[l] = kernels.conv2d_backward_weights(a_l, d, stride=1)
        if l == 0 and not need_input_grad:
            break
        dx = take(("den_dx", l), a_l.shape, a_l.dtype)
        dx = kernels.conv2d_backward_input(d, params.layers[l].w, stride=1,
                                           in_hw=a_l.shape[1:3], out=dx)
        if l == 0:
            return grads, dldy + dx
        d = dx if linear else kernels.relu_backward(dx, a_l, out=dx)
    return grads, None


def denoise_forward(params, noisy):
    """Denoise a single H x W x C image."""
    if noisy.ndim != 3 or noisy.shape[2] != params.channels:
        raise ValueError(
            f"expected HxWx{params.channels} image, got shape {noisy.shape}"
        )
    y, _ = forward_batch(params, noisy[None].astype(params.layers[0].w.dtype))
    return y[0]


def mse_loss(a, b):
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def mse_grad(a, b):
    """d(mse_loss)/da, same dtype as a."""
    return (2.0 / a.size) * (a - b)
