"""Bundled model state: denoiser + awareness module, with named-tensor
access, trainability resolution, content hashing, and checkpoint I/O."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .denoiser import ConvLayer, DenoiserParams, init_denoiser
from .usa import EmbeddingParams, HeadParams, init_usa

SEG_MODES = ("seg_supervised", "seg_permuted_blocks", "seg_permuted_pixels")
DENOISE_MODES = ("mse_only", "usaid", "ssaid")


@dataclass
class ModelState:
    denoiser: DenoiserParams | None = None
    emb: EmbeddingParams | None = None
    head: HeadParams | None = None

    def named_tensors(self) -> dict:
        """Live views of every tensor, keyed by a stable name."""
        out = {}
        if self.denoiser is not None:
            for i, layer in enumerate(self.denoiser.layers):
                out[f"den.{i}.w"] = layer.w
                out[f"den.{i}.b"] = layer.b
        if self.emb is not None:
            out.update({"emb.w1": self.emb.w1, "emb.b1": self.emb.b1,
                        "emb.w2": self.emb.w2, "emb.b2": self.emb.b2})
        if self.head is not None:
            out.update({"head.w": self.head.w, "head.b": self.head.b})
        return out

    def content_hash(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_tensors().items()):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def trainable_names(state: ModelState, cfg) -> list:
    """Which tensors the optimizer owns, per training mode.

    The embedding is frozen everywhere except segmentation training with
    train_embedding set; the head trains in segmentation modes and, when
    train_head is set, in the awareness modes too.
    """
    names = []
    if cfg.mode in DENOISE_MODES:
        names += [n for n in state.named_tensors() if n.startswith("den.")]
        if cfg.mode in ("usaid", "ssaid") and cfg.train_head:
            names += ["head.w", "head.b"]
    elif cfg.mode in SEG_MODES:
        names += ["head.w", "head.b"]
        if cfg.train_embedding:
            names += ["emb.w1", "emb.b1", "emb.w2", "emb.b2"]
    else:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    return names


def build_model(cfg, dtype=np.float32) -> ModelState:
    """Initialize the networks a config calls for (seeded)."""
    state = ModelState()
    if cfg.mode in DENOISE_MODES:
        state.denoiser = init_denoiser(cfg.depth, cfg.width, cfg.channels,
                                       seed=cfg.seed, dtype=dtype)
    if cfg.mode != "mse_only":
        state.emb, state.head = init_usa(cfg.f_emb, cfg.k_classes,
                                         seed=cfg.seed, channels=cfg.channels,
                                         dtype=dtype)
    return state


def save_state(path, state: ModelState, meta: dict | None = None) -> None:
    ckpt.save_checkpoint(path, state.named_tensors(), meta)


def load_state(path) -> tuple:
    """Rebuild a ModelState (and meta) from a checkpoint container."""
    tensors, meta = ckpt.load_checkpoint(path)
    state = ModelState()
    den_idx = sorted({int(n.split(".")[1]) for n in tensors if n.startswith("den.")})
    if den_idx:
        layers = [ConvLayer(tensors[f"den.{i}.w"], tensors[f"den.{i}.b"])
                  for i in den_idx]
        state.denoiser = DenoiserParams(layers)
    if "emb.w1" in tensors:
        state.emb = EmbeddingParams(tensors["emb.w1"], tensors["emb.b1"],
                                    tensors["emb.w2"], tensors["emb.b2"])
    if "head.w" in tensors:
        state.head = HeadParams(tensors["head.w"], tensors["head.b"])
    return state, meta
