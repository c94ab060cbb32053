"""Segmentation-awareness module: frozen feature pyramid, K-class head,
pixel-wise softmax, and the entropy / cross-entropy losses.

The embedding is two stride-2 3x3 conv stages with ReLU, so the class
probability map lives at 1/4 the input resolution (ceil division). Its
weights are drawn once from a Gaussian and never trained; the head (one
3x3 conv to K channels) is frozen by default and trainable by config.
Entropy is measured in nats, so ln(K) is the exact upper bound.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class EmbeddingParams:
    w1: np.ndarray  # (3, 3, c_in, f_emb), stride 2
    b1: np.ndarray
    w2: np.ndarray  # (3, 3, f_emb, f_emb), stride 2
    b2: np.ndarray
    init_mode: str = "random_gaussian"
    frozen: bool = True

    @property
    def f_emb(self) -> int:
        return self.w1.shape[3]


@dataclass
class HeadParams:
    w: np.ndarray  # (3, 3, f_emb, k)
    b: np.ndarray  # (k,)
    trainable: bool = False

    @property
    def k(self) -> int:
        return self.w.shape[3]


@dataclass
class ProbMap:
    """Per-pixel class distribution, channel-first (K, H', W')."""

    probs: np.ndarray
    logits: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.probs.shape[0]


INIT_STD = 0.05


def init_usa(f_emb, k, seed=0, channels=3, weights_path=None, dtype=np.float32):
    """Gaussian-initialized (std 0.05) frozen embedding plus K-class head.

    With weights_path, tensors are loaded from a checkpoint container
    instead and shape-checked against the requested architecture.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if f_emb < 1:
        raise ValueError(f"f_emb must be >= 1, got {f_emb}")
    rng = np.random.default_rng((seed, 0x5A))
    emb = EmbeddingParams(
        w1=(rng.standard_normal((3, 3, channels, f_emb)) * INIT_STD).astype(dtype),
        b1=np.zeros(f_emb, dtype),
        w2=(rng.standard_normal((3, 3, f_emb, f_emb)) * INIT_STD).astype(dtype),
        b2=np.zeros(f_emb, dtype),
    )
    head = HeadParams(
        w=(rng.standard_normal((3, 3, f_emb, k)) * INIT_STD).astype(dtype),
        b=np.zeros(k, dtype),
    )
    if weights_path is not None:
        _load_usa_weights(emb, head, weights_path)
        emb.init_mode = "loaded"
    return emb, head


def _load_usa_weights(emb, head, path):
    from .checkpoint import load_checkpoint

    tensors, _ = load_checkpoint(path)
    slots = {
        "emb.w1": (emb, "w1"), "emb.b1": (emb, "b1"),
        "emb.w2": (emb, "w2"), "emb.b2": (emb, "b2"),
        "head.w": (head, "w"), "head.b": (head, "b"),
    }
    for name, (obj, attr) in slots.items():
        if name not in tensors:
            raise ValueError(f"weights file {path} is missing tensor '{name}'")
        cur = getattr(obj, attr)
        if tensors[name].shape != cur.shape:
            raise ValueError(
                f"tensor '{name}' has shape {tensors[name].shape}, "
                f"expected {cur.shape}"
            )
        setattr(obj, attr, tensors[name].astype(cur.dtype))


def forward_batch(emb, head, x, keep_cache=False, pool=None):
    """Logits of the K-class head: (B, H', W', K) at 1/4 resolution."""
    take = pool.take if pool is not None else (lambda k, s, d: np.empty(s, d))
    b, h, w, _ = x.shape
    h1, w1 = kernels.out_hw(h, w, 2)
    h2, w2 = kernels.out_hw(h1, w1, 2)
    e1 = take(("usa_e1", 0), (b, h1, w1, emb.f_emb), x.dtype)
    e1 = kernels.conv2d_forward(x, emb.w1, emb.b1, stride=2, relu=True, out=e1)
    e2 = take(("usa_e2", 0), (b, h2, w2, emb.f_emb), x.dtype)
    e2 = kernels.conv2d_forward(e1, emb.w2, emb.b2, stride=2, relu=True, out=e2)
    z = take(("usa_z", 0), (b, h2, w2, head.k), x.dtype)
    z = kernels.conv2d_forward(e2, head.w, head.b, stride=1, out=z)
    cache = (x, e1, e2) if keep_cache else None
    return z, cache


def backward_batch(emb, head, cache, dz, need_head_grads=False,
                   need_emb_grads=False, pool=None):
    """Backprop dz (dL/dlogits) to the module input.

    Returns (dimg, head_grads, emb_grads); gradient dicts are None unless
    requested (the embedding is frozen in normal training).
    """
    take = pool.take if pool is not None else (lambda k, s, d: np.empty(s, d))
    x, e1, e2 = cache
    head_grads = emb_grads = None
    if need_head_grads:
        dw, db = kernels.conv2d_backward_weights(e2, dz, stride=1)
        head_grads = {"w": dw, "b": db}
    de2 = take(("usa_de2", 0), e2.shape, e2.dtype)
    de2 = kernels.conv2d_backward_input(dz, head.w, stride=1,
                                        in_hw=e2.shape[1:3], out=de2)
    kernels.relu_backward(de2, e2, out=de2)
    if need_emb_grads:
        dw2, db2 = kernels.conv2d_backward_weights(e1, de2, stride=2)
    de1 = take(("usa_de1", 0), e1.shape, e1.dtype)
    de1 = kernels.conv2d_backward_input(de2, emb.w2, stride=2,
                                        in_hw=e1.shape[1:3], out=de1)
    kernels.relu_backward(de1, e1, out=de1)
    if need_emb_grads:
        dw1, db1 = kernels.conv2d_backward_weights(x, de1, stride=2)
        emb_grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
    dimg = take(("usa_dimg", 0), x.shape, x.dtype)
    dimg = kernels.conv2d_backward_input(de1, emb.w1, stride=2,
                                         in_hw=x.shape[1:3], out=dimg)
    return dimg, head_grads, emb_grads


def softmax(z, axis=-1):
    """Numerically stabilized softmax (max subtraction)."""
    zs = z - z.max(axis=axis, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=axis, keepdims=True)


def usa_forward(emb, head, img):
    """ProbMap of a single H x W x C image."""
    if img.ndim != 3 or img.shape[2] != emb.w1.shape[2]:
        raise ValueError(
            f"expected HxWx{emb.w1.shape[2]} image, got shape {img.shape}"
        )
    z, _ = forward_batch(emb, head, img[None].astype(emb.w1.dtype))
    probs = softmax(z[0], axis=-1)
    return ProbMap(probs=np.moveaxis(probs, -1, 0),
                   logits=np.moveaxis(z[0], -1, 0))


def _as_prob_array(pm):
    probs = pm.probs if isinstance(pm, ProbMap) else np.asarray(pm)
    if probs.ndim != 3:
        raise ValueError(f"expected (K, H', W') probabilities, got {probs.shape}")
    return probs


def entropy_loss(pm):
    """Mean over pixels of the Shannon entropy (nats) of the K-vector.

    Per-pixel terms are summed in sorted order, so the value is exactly
    invariant under any channel relabeling.
    """
    probs = _as_prob_array(pm).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    plogp = np.sort(plogp, axis=0)
    return float(-plogp.sum(axis=0).mean())


def entropy_from_probs_batch(p):
    """Batched mean pixel entropy from (B, H', W', K) float probabilities."""
    p64 = p.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p64 > 0, p64 * np.log(p64), 0.0)
    return float(-plogp.sum(axis=-1).mean())


def entropy_grad_logits(p):
    """d(mean pixel entropy)/d(logits) for batched (B, H', W', K) probs."""
    logp = np.log(np.maximum(p, np.finfo(p.dtype).tiny))
    h = -(p * logp).sum(axis=-1, keepdims=True)
    n_pix = p.size // p.shape[-1]
    return (-p * (logp + h) / n_pix).astype(p.dtype)


def ce_loss(pm, target):
    """Mean over pixels of -ln p[target]; target is an (H', W') label map."""
    target = np.asarray(target)
    if isinstance(pm, ProbMap) and pm.logits is not None:
        z = pm.logits.astype(np.float64)  # (K, H', W')
        if z.shape[1:] != target.shape:
            raise ValueError(f"target shape {target.shape} != map {z.shape[1:]}")
        if target.max() >= z.shape[0]:
            raise ValueError(f"label {target.max()} out of range for K={z.shape[0]}")
        lse = np.logaddexp.reduce(z - z.max(axis=0, keepdims=True), axis=0) \
            + z.max(axis=0)
        picked = np.take_along_axis(z, target[None], axis=0)[0]
        return float((lse - picked).mean())
    probs = _as_prob_array(pm).astype(np.float64)
    if target.max() >= probs.shape[0]:
        raise ValueError(f"label {target.max()} out of range for K={probs.shape[0]}")
    picked = np.take_along_axis(probs, target[None], axis=0)[0]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def ce_loss_from_logits_batch(z, target):
    """Batched stable cross entropy; z (B, H', W', K), target (B, H', W')."""
    z64 = z.astype(np.float64)
    zmax = z64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z64 - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z64, target[..., None], axis=-1)[..., 0]
    return float((lse - picked).mean())


def ce_grad_logits(p, target):
    """d(mean CE)/d(logits): (softmax - onehot) / n_pixels."""
    g = p.copy()
    np.put_along_axis(
        g, target[..., None], np.take_along_axis(g, target[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    n_pix = p.size // p.shape[-1]
    return g / n_pix


def downsample_labels(seg, factor):
    """Nearest-neighbor label subsampling anchored at (0, 0)."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.ascontiguousarray(seg[::factor, ::factor])
