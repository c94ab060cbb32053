"""Full-reference quality metrics (PSNR, SSIM), segmentation accuracy
(mIoU), and the mean pixel-entropy statistic.

Images are compared after clipping to [0, peak]: the denoiser output is
deliberately left unclipped elsewhere, clipping is a metric-time step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import usa

LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b, peak=1.0):
    """10*log10(peak^2 / MSE) in dB; returns +inf for identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ac = np.clip(a.astype(np.float64), 0, peak)
    bc = np.clip(b.astype(np.float64), 0, peak)
    mse = float(np.mean((ac - bc) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def to_gray(img):
    """Luminance for HxWx3, passthrough for HxWx1 / HxW."""
    a = np.asarray(img, np.float64)
    if a.ndim == 3 and a.shape[2] == 3:
        return a @ LUMA
    if a.ndim == 3:
        return a[:, :, 0]
    return a


def _gauss1d(n, sigma):
    x = np.arange(n) - (n - 1) / 2
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable correlation, cropped to fully-valid windows."""
    half = len(k) // 2
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a, b, peak=1.0):
    """Single-scale SSIM, 11x11 Gaussian window sigma=1.5, valid windows."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ga = np.clip(to_gray(a), 0, peak)
    gb = np.clip(to_gray(b), 0, peak)
    if min(ga.shape) < 11:
        raise ValueError(f"image {ga.shape} smaller than the 11x11 window")
    k = _gauss1d(11, 1.5)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(ga, k)
    mu_b = _filter_valid(gb, k)
    var_a = _filter_valid(ga * ga, k) - mu_a * mu_a
    var_b = _filter_valid(gb * gb, k) - mu_b * mu_b
    cov = _filter_valid(ga * gb, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def miou(pred, gt, k):
    """Mean IoU over classes present in gt or pred; absent classes excluded."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.max() >= k or gt.max() >= k:
        raise ValueError(f"label out of range for k={k}")
    conf = np.bincount((gt.ravel() * k + pred.ravel()).astype(np.int64),
                       minlength=k * k).reshape(k, k)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean())


def mean_entropy(pm):
    """Mean per-pixel entropy of a probability map (nats)."""
    return usa.entropy_loss(pm)


@dataclass
class MetricsReport:
    """Per-image metric rows plus their aggregate means."""

    sigma: float
    denoiser_id: str
    per_image: list[dict] = field(default_factory=list)

    def add(self, **metrics):
        self.per_image.append(metrics)

    def aggregate(self) -> dict:
        if not self.per_image:
            return {}
        keys = self.per_image[0].keys()
        return {k: float(np.mean([row[k] for row in self.per_image])) for k in keys}
