"""Segmentation-aware image denoising with an unsupervised pixel-entropy
penalty: residual denoiser, frozen random feature pyramid with a K-class
head, composite-loss training, quality metrics, and the experiment
harness that exercises the mechanism at desk scale."""

__version__ = "0.1.0"

from . import (buffers, checkpoint, data, denoiser, experiments, kernels,
               metrics, model, niqe, training, usa)

__all__ = ["buffers", "checkpoint", "data", "denoiser", "experiments",
           "kernels", "metrics", "model", "niqe", "training", "usa",
           "__version__"]
