"""End-to-end optimization: composite losses, Adam, the multi-step
learning-rate schedule, and the training loop.

Modes:
  mse_only            reconstruction loss alone
  usaid               mse + gamma * mean pixel entropy of the head output
                      computed on the denoised image (the mechanism)
  ssaid               mse + pixel-wise cross entropy against true labels,
                      unit weights on both terms
  seg_supervised      segmenter training on clean images (no denoiser)
  seg_permuted_blocks labels quadrant-permuted per image before training
  seg_permuted_pixels labels pixel-permuted per image before training

Training arithmetic is float32; the finite-difference oracles run the
same code in float64. Every random draw derives from (seed, step) so two
runs with one config are bit-identical.
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import denoiser as dn
from . import usa
from .buffers import ArrayPool
from .data import add_gaussian_noise, permute_blocks, permute_pixels, sample_patches
from .metrics import psnr
from .model import (DENOISE_MODES, SEG_MODES, ModelState, build_model,
                    trainable_names)

DOWNSAMPLE = 4  # head output lives at 1/4 input resolution


@dataclass
class TrainConfig:
    mode: str = "usaid"
    k_classes: int = 6
    gamma: float = 1.0
    sigma_range: tuple = (0.0, 55.0)
    batch_size: int = 16
    patch: int = 48
    lr0: float = 1e-3
    decay_epochs: tuple = (10, 40, 80)
    epochs: int = 100
    steps_per_epoch: int | None = None
    seed: int = 0
    train_head: bool = False
    train_embedding: bool = False
    depth: int = 7
    width: int = 32
    channels: int = 3
    f_emb: int = 64
    val_sigma: float = 25.0
    use_batchnorm: bool = False  # reserved; not implemented at desk scale
    record_steps: bool = False

    def __post_init__(self):
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        lo, hi = self.sigma_range
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not (0 <= lo <= hi <= 255):
            raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi <= 255, got {self.sigma_range}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.use_batchnorm:
            raise NotImplementedError("batch norm is reserved by config, not implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    mse: float = 0.0
    usa: float = 0.0
    ce: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_tensors(cls, tensors: dict, names) -> "AdamState":
        return cls(m={n: np.zeros_like(tensors[n]) for n in names},
                   v={n: np.zeros_like(tensors[n]) for n in names})


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: LossBreakdown
    val_psnr: float
    val_entropy: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)  # populated if record_steps

    def to_csv(self, path):
        lines = ["epoch,lr,mse,usa,ce,total,val_psnr,val_entropy,seconds"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.lr:.9g},{r.loss.mse:.9g},{r.loss.usa:.9g},"
                f"{r.loss.ce:.9g},{r.loss.total:.9g},{r.val_psnr:.9g},"
                f"{r.val_entropy:.9g},{r.seconds:.3f}"
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 / 10^(number of decay epochs reached)."""
    drops = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.lr0 * 10.0 ** (-drops)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> AdamState:
    """In-place bias-corrected Adam update on the trainable tensors."""
    if set(grads) != set(state.m):
        missing = set(state.m) - set(grads)
        extra = set(grads) - set(state.m)
        raise ValueError(f"gradient set mismatch: missing={missing}, extra={extra}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _downsample_batch_labels(labels):
    return np.ascontiguousarray(labels[:, ::DOWNSAMPLE, ::DOWNSAMPLE])


def loss_and_grads(state: ModelState, batch: dict, cfg: TrainConfig, pool=None):
    """One batch's LossBreakdown and gradients for the trainable tensors.

    batch carries "clean" (B,P,P,C) float patches, "noisy" in denoising
    modes, and integer "labels" (B,P,P) when the mode needs supervision.
    The awareness term is evaluated on the denoised output in usaid/ssaid
    and on the clean image in segmentation modes.
    """
    labels = batch.get("labels")
    needs_labels = cfg.mode in ("ssaid",) + SEG_MODES
    if needs_labels and labels is None:
        raise ValueError(f"mode {cfg.mode!r} requires a labeled batch")
    grads = {}
    lb = LossBreakdown()

    if cfg.mode in SEG_MODES:
        x = batch["clean"]
        z, cache = usa.forward_batch(state.emb, state.head, x, keep_cache=True,
                                     pool=pool)
        p = usa.softmax(z)
        tgt = _downsample_batch_labels(labels)
        lb.ce = usa.ce_loss_from_logits_batch(z, tgt)
        lb.total = lb.ce
        lb.weights = {"ce": 1.0}
        dz = usa.ce_grad_logits(p, tgt)
        _, head_g, emb_g = usa.backward_batch(
            state.emb, state.head, cache, dz,
            need_head_grads=True, need_emb_grads=cfg.train_embedding, pool=pool)
        grads["head.w"], grads["head.b"] = head_g["w"], head_g["b"]
        if cfg.train_embedding:
            grads.update({"emb.w1": emb_g["w1"], "emb.b1": emb_g["b1"],
                          "emb.w2": emb_g["w2"], "emb.b2": emb_g["b2"]})
        return lb, grads

    noisy, clean = batch["noisy"], batch["clean"]
    y, cache = dn.forward_batch(state.denoiser, noisy, keep_cache=True, pool=pool)
    lb.mse = dn.mse_loss(y, clean)
    dldy = dn.mse_grad(y, clean)

    aware = (cfg.mode == "usaid" and cfg.gamma > 0) or cfg.mode == "ssaid"
    if cfg.mode == "usaid":
        lb.weights = {"mse": 1.0, "usa": cfg.gamma}
    elif cfg.mode == "ssaid":
        lb.weights = {"mse": 1.0, "ce": 1.0}
    else:
        lb.weights = {"mse": 1.0}

    if aware:
        z, ucache = usa.forward_batch(state.emb, state.head, y, keep_cache=True,
                                      pool=pool)
        p = usa.softmax(z)
        if cfg.mode == "usaid":
            lb.usa = usa.entropy_from_probs_batch(p)
            dz = cfg.gamma * usa.entropy_grad_logits(p)
        else:
            tgt = _downsample_batch_labels(labels)
            lb.ce = usa.ce_loss_from_logits_batch(z, tgt)
            dz = usa.ce_grad_logits(p, tgt)
        dimg, head_g, _ = usa.backward_batch(state.emb, state.head, ucache, dz,
                                             need_head_grads=cfg.train_head,
                                             pool=pool)
        dldy = dldy + dimg
        if cfg.train_head:
            grads["head.w"], grads["head.b"] = head_g["w"], head_g["b"]
    elif cfg.mode == "usaid":
        # gamma == 0: report the entropy (no gradient contribution)
        z, _ = usa.forward_batch(state.emb, state.head, y, pool=pool)
        lb.usa = usa.entropy_from_probs_batch(usa.softmax(z))

    lb.total = lb.mse + cfg.gamma * lb.usa if cfg.mode == "usaid" else lb.mse + lb.ce
    den_grads, _ = dn.backward_batch(state.denoiser, cache, dldy, pool=pool)
    for i, (dw, db) in enumerate(den_grads):
        grads[f"den.{i}.w"] = dw
        grads[f"den.{i}.b"] = db
    return lb, grads


def _prepare_labeled(corpus, cfg):
    """Apply the per-image label permutation the mode calls for."""
    if cfg.mode not in ("seg_permuted_blocks", "seg_permuted_pixels"):
        return corpus
    permute = permute_blocks if cfg.mode.endswith("blocks") else permute_pixels
    out = copy.copy(corpus)
    out.items = []
    for it in corpus.items:
        it2 = copy.copy(it)
        it2.segmap = permute(it.segmap, seed=(cfg.seed, it.index))
        out.items.append(it2)
    return out


def _validate(state, cfg, val_items, pool):
    """Mean PSNR and mean prediction entropy on the held-out split."""
    if not val_items:
        return float("nan"), float("nan")
    psnrs, entropies = [], []
    for it in val_items:
        if cfg.mode in SEG_MODES:
            img = it.image[None].astype(np.float32)
            z, _ = usa.forward_batch(state.emb, state.head, img, pool=None)
            entropies.append(usa.entropy_from_probs_batch(usa.softmax(z)))
            continue
        ns = add_gaussian_noise(it.image, cfg.val_sigma, seed=(cfg.seed, 0xE, it.index))
        y, _ = dn.forward_batch(state.denoiser, ns.noisy[None], pool=None)
        psnrs.append(psnr(y[0], it.image))
        if state.emb is not None:
            z, _ = usa.forward_batch(state.emb, state.head, y, pool=None)
            entropies.append(usa.entropy_from_probs_batch(usa.softmax(z)))
    vp = float(np.mean(psnrs)) if psnrs else float("nan")
    ve = float(np.mean(entropies)) if entropies else float("nan")
    return vp, ve


def train(cfg: TrainConfig, corpus, val_corpus=None):
    """Run the full optimization; returns (ModelState, TrainHistory).

    Per step: sample stride-1 patches, draw one sigma per patch from
    sigma_range, add noise, compute the composite loss and gradients,
    and take one Adam step. Aborts on a non-finite loss.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    train_items = corpus.subset("train")
    if len(train_items) == 0:
        train_items = corpus
    val_items = (val_corpus.items if val_corpus is not None
                 else corpus.subset("val").items)
    labeled = all(it.segmap is not None for it in train_items.items)
    if cfg.mode in ("ssaid",) + SEG_MODES and not labeled:
        raise ValueError(f"mode {cfg.mode!r} requires a labeled corpus")
    train_items = _prepare_labeled(train_items, cfg)

    state = build_model(cfg)
    names = trainable_names(state, cfg)
    tensors = state.named_tensors()
    adam = AdamState.for_tensors(tensors, names)
    pool = ArrayPool()
    history = TrainHistory()

    if cfg.steps_per_epoch is None:
        positions = sum((it.image.shape[0] - cfg.patch + 1)
                        * (it.image.shape[1] - cfg.patch + 1)
                        for it in train_items.items)
        steps_per_epoch = max(1, int(np.ceil(positions / cfg.batch_size)))
    else:
        steps_per_epoch = cfg.steps_per_epoch

    lo, hi = cfg.sigma_range
    denoise_mode = cfg.mode in DENOISE_MODES
    global_step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        epoch_losses = []
        for _ in range(steps_per_epoch):
            pairs = sample_patches(train_items, cfg.patch, cfg.batch_size,
                                   seed=(cfg.seed, 0xA, global_step))
            clean = np.stack([p for p, _ in pairs]).astype(np.float32)
            batch = {"clean": clean}
            if labeled:
                batch["labels"] = np.stack([s for _, s in pairs])
            if denoise_mode:
                rng = np.random.default_rng((cfg.seed, 0xB, global_step))
                sig = (np.full(cfg.batch_size, lo, np.float32) if lo == hi
                       else rng.uniform(lo, hi, cfg.batch_size).astype(np.float32))
                eps = rng.standard_normal(clean.shape, dtype=np.float32)
                batch["noisy"] = clean + eps * (sig[:, None, None, None] / 255.0)
            lb, grads = loss_and_grads(state, batch, cfg, pool=pool)
            if not np.isfinite(lb.total):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"step {global_step} ({lb})"
                )
            adam_step(adam, tensors, grads, lr)
            epoch_losses.append(lb)
            if cfg.record_steps:
                history.step_losses.append((global_step, lb))
            global_step += 1
        mean_lb = LossBreakdown(
            mse=float(np.mean([l.mse for l in epoch_losses])),
            usa=float(np.mean([l.usa for l in epoch_losses])),
            ce=float(np.mean([l.ce for l in epoch_losses])),
            total=float(np.mean([l.total for l in epoch_losses])),
            weights=epoch_losses[0].weights,
        )
        vp, ve = _validate(state, cfg, val_items, pool)
        history.records.append(EpochRecord(epoch, lr, mean_lb, vp, ve,
                                           time.perf_counter() - t0))
    return state, history
