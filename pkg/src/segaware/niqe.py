"""No-reference quality score in the NIQE family.

Pipeline: local mean/contrast normalization (MSCN) with a 7x7 Gaussian
and a 1e-3 stabilizer, asymmetric-generalized-Gaussian fits of the MSCN
field and its four neighbor products at two scales (18 features each,
36 total), a multivariate Gaussian fitted over sharp pristine patches,
and a Mahalanobis-style distance between a test image's patch statistics
and that model. Constants follow the metric's standard construction;
only relative orderings are contractual, not parity with any reference
binary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn

from .metrics import to_gray, _gauss1d

MSCN_WINDOW = 7
MSCN_SIGMA = 7.0 / 6.0
STABILIZER = 1e-3
SHARPNESS_KEEP = 0.75  # keep the sharpest 75% of patches when fitting
N_FEATURES = 36

_aggd_grid = None


def _grid():
    global _aggd_grid
    if _aggd_grid is None:
        gam = np.arange(0.2, 10.0 + 1e-9, 0.001)
        r_gam = gamma_fn(2.0 / gam) ** 2 / (gamma_fn(1.0 / gam) * gamma_fn(3.0 / gam))
        _aggd_grid = (gam, r_gam)
    return _aggd_grid


def fit_aggd(vec):
    """Moment-matched AGGD parameters (alpha, beta_left, beta_right)."""
    v = np.asarray(vec, np.float64).ravel()
    left = v[v < 0]
    right = v[v > 0]
    std_l = np.sqrt(np.mean(left * left)) if left.size else 1e-6
    std_r = np.sqrt(np.mean(right * right)) if right.size else 1e-6
    std_l = max(std_l, 1e-6)
    std_r = max(std_r, 1e-6)
    gammahat = std_l / std_r
    sq = np.mean(v * v)
    rhat = np.mean(np.abs(v)) ** 2 / sq if sq > 0 else 1e-6
    rhatnorm = rhat * (gammahat**3 + 1) * (gammahat + 1) / (gammahat**2 + 1) ** 2
    gam, r_gam = _grid()
    alpha = gam[np.argmin((r_gam - rhatnorm) ** 2)]
    conv = np.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    return float(alpha), float(std_l * conv), float(std_r * conv)


def mscn(gray):
    """(MSCN coefficients, local std field) of a [0,1] grayscale image."""
    k = _gauss1d(MSCN_WINDOW, MSCN_SIGMA)
    g = np.asarray(gray, np.float64)
    mu = ndimage.correlate1d(g, k, axis=0, mode="nearest")
    mu = ndimage.correlate1d(mu, k, axis=1, mode="nearest")
    m2 = ndimage.correlate1d(g * g, k, axis=0, mode="nearest")
    m2 = ndimage.correlate1d(m2, k, axis=1, mode="nearest")
    sd = np.sqrt(np.maximum(m2 - mu * mu, 0.0))
    return (g - mu) / (sd + STABILIZER), sd


def _block_features(block):
    """18 AGGD features of one MSCN block."""
    feats = []
    alpha, bl, br = fit_aggd(block)
    feats += [alpha, (bl + br) / 2]
    pairs = [
        block[:, :-1] * block[:, 1:],      # horizontal
        block[:-1, :] * block[1:, :],      # vertical
        block[:-1, :-1] * block[1:, 1:],   # main diagonal
        block[:-1, 1:] * block[1:, :-1],   # anti diagonal
    ]
    for prod in pairs:
        alpha, bl, br = fit_aggd(prod)
        eta = (br - bl) * gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha)
        feats += [alpha, eta, bl, br]
    return feats


def _half_pool(gray):
    h, w = (gray.shape[0] // 2) * 2, (gray.shape[1] // 2) * 2
    g = gray[:h, :w]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def _grid_positions(extent, patch):
    """Top-left offsets with ~50% overlap plus a flush-end position."""
    stride = max(patch // 2, 1)
    pos = list(range(0, extent - patch + 1, stride))
    if not pos:
        return []
    if pos[-1] != extent - patch:
        pos.append(extent - patch)
    return pos


def image_patch_features(img, patch):
    """(features (n,36), sharpness (n,)) over the patch grid of one image."""
    gray = to_gray(np.clip(img, 0, 1))
    m1, sd1 = mscn(gray)
    m2, _ = mscn(_half_pool(gray))
    rows = _grid_positions(gray.shape[0], patch)
    cols = _grid_positions(gray.shape[1], patch)
    feats, sharps = [], []
    for r in rows:
        for c in cols:
            f1 = _block_features(m1[r : r + patch, c : c + patch])
            half = patch // 2
            f2 = _block_features(m2[r // 2 : r // 2 + half, c // 2 : c // 2 + half])
            feats.append(f1 + f2)
            sharps.append(float(sd1[r : r + patch, c : c + patch].mean()))
    return np.nan_to_num(np.asarray(feats)), np.asarray(sharps)


@dataclass
class NiqeModel:
    mean: np.ndarray          # (36,)
    cov: np.ndarray           # (36, 36)
    patch: int
    n_patches: int            # patches retained by the fit


def fit_niqe(pristine, patch=48, min_patches=50):
    """Fit the pristine-statistics model on a corpus of clean images."""
    all_feats, all_sharp = [], []
    images = pristine.images() if hasattr(pristine, "images") else pristine
    for img in images:
        f, s = image_patch_features(img, patch)
        all_feats.append(f)
        all_sharp.append(s)
    feats = np.concatenate(all_feats)
    sharp = np.concatenate(all_sharp)
    keep = sharp >= np.quantile(sharp, 1.0 - SHARPNESS_KEEP)
    feats = feats[keep]
    if feats.shape[0] < min_patches:
        raise ValueError(
            f"only {feats.shape[0]} patches after sharpness selection, "
            f"need >= {min_patches}"
        )
    return NiqeModel(mean=feats.mean(axis=0), cov=np.cov(feats, rowvar=False),
                     patch=patch, n_patches=int(feats.shape[0]))


def niqe(img, model):
    """Smaller is better; distance from the pristine patch statistics."""
    feats, _ = image_patch_features(img, model.patch)
    if feats.shape[0] < 4:
        raise ValueError(
            f"image too small: {feats.shape[0]} patches of size {model.patch}, "
            "need >= 4"
        )
    nu = feats.mean(axis=0)
    cov_img = np.cov(feats, rowvar=False)
    pooled = (model.cov + cov_img) / 2.0
    inv = np.linalg.pinv(pooled)
    d = nu - model.mean
    return float(np.sqrt(max(float(d @ inv @ d), 0.0)))


def model_to_tensors(model):
    return {"niqe.mean": model.mean.astype(np.float32),
            "niqe.cov": model.cov.astype(np.float32),
            "niqe.patch": np.array([model.patch], np.float32),
            "niqe.n_patches": np.array([model.n_patches], np.float32)}


def model_from_tensors(tensors):
    return NiqeModel(mean=tensors["niqe.mean"].astype(np.float64),
                     cov=tensors["niqe.cov"].astype(np.float64),
                     patch=int(tensors["niqe.patch"][0]),
                     n_patches=int(tensors["niqe.n_patches"][0]))
