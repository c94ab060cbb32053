"""Toy corpora, image-folder ingestion, Gaussian noise, patch sampling,
and the label-permutation operators.

All generators are pure functions of (inputs, seed). Per-item randomness
derives from (master seed, item index) so a corpus is bit-identical no
matter how or in what order it is produced. Noise sigma is quoted on the
0-255 scale, as conventional for 8-bit imagery, and divided by 255
internally; noisy images are NOT clipped to [0,1] (clipping happens only
at metric time).
"""
from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage


def _seed_key(seed, tag):
    """SeedSequence entropy from an int-or-tuple seed plus a stream tag."""
    if isinstance(seed, (tuple, list)):
        return (*seed, tag)
    return (seed, tag)


@dataclass
class CorpusItem:
    image: np.ndarray              # (H, W, C) float32 in [0, 1]
    segmap: np.ndarray | None      # (H, W) int32 labels in [0, K)
    split: str = "train"
    index: int = 0


@dataclass
class Corpus:
    items: list[CorpusItem] = field(default_factory=list)
    k_classes: int | None = None
    provenance: str = ""
    skipped_files: int = 0

    def __len__(self):
        return len(self.items)

    def subset(self, split: str) -> "Corpus":
        return Corpus([it for it in self.items if it.split == split],
                      self.k_classes, self.provenance)

    def images(self):
        return [it.image for it in self.items]


@dataclass
class NoisySample:
    clean: np.ndarray
    noisy: np.ndarray
    sigma: float
    seed: int


def class_palette(k_classes: int, channels: int = 3) -> np.ndarray:
    """Fixed per-class colors (class 0 is the background, not included)."""
    n = k_classes - 1
    cols = np.zeros((n, channels), np.float32)
    for i in range(n):
        if channels == 3:
            cols[i] = colorsys.hsv_to_rgb(i / max(n, 1), 0.65, 0.9)
        else:
            cols[i] = 0.15 + 0.8 * i / max(n - 1, 1)
    return cols


def _low_freq_background(rng, h, w, channels):
    coarse = rng.standard_normal((max(h // 8, 2), max(w // 8, 2), channels))
    bg = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)
    bg = bg[:h, :w, :]
    bg = (bg - bg.mean()) / (bg.std() + 1e-9)
    tint = rng.uniform(0.3, 0.55, channels)
    return np.clip(tint + 0.08 * bg, 0.0, 1.0).astype(np.float32)


def _raster_shape(rng, kind, h, w):
    """Boolean mask of one random non-degenerate shape."""
    yy, xx = np.mgrid[0:h, 0:w]
    m = min(h, w)
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    if kind == 0:  # rectangle
        hh = rng.uniform(0.08, 0.22) * m
        ww = rng.uniform(0.08, 0.22) * m
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    if kind == 1:  # disk
        r = rng.uniform(0.08, 0.2) * m
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle: three vertices around the center, half-plane rasterization
    ang = np.sort(rng.uniform(0, 2 * np.pi, 3))
    rad = rng.uniform(0.12, 0.28, 3) * m
    vy = cy + rad * np.sin(ang)
    vx = cx + rad * np.cos(ang)
    mask = np.ones((h, w), bool)
    for i in range(3):
        y0, x0 = vy[i], vx[i]
        y1, x1 = vy[(i + 1) % 3], vx[(i + 1) % 3]
        y2, x2 = vy[(i + 2) % 3], vx[(i + 2) % 3]
        side = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        ref = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        mask &= side * ref >= 0
    return mask


def _gen_shapes_item(rng, h, w, k_classes, channels, min_px):
    palette = class_palette(k_classes, channels)
    for _ in range(50):
        img = _low_freq_background(rng, h, w, channels)
        seg = np.zeros((h, w), np.int32)
        for cls in range(1, k_classes):
            mask = _raster_shape(rng, (cls - 1) % 3, h, w)
            color = np.clip(palette[cls - 1] + rng.normal(0, 0.04, channels), 0, 1)
            img[mask] = color.astype(np.float32)
            seg[mask] = cls
        counts = np.bincount(seg.ravel(), minlength=k_classes)
        if (counts[1:] >= min_px).all():
            return img, seg
    # geometrically near-impossible at supported sizes; be explicit anyway
    raise RuntimeError("could not place all classes with visible area")


def generate_shapes_corpus(n_images, size, k_classes, seed, channels=3,
                           split="train"):
    """Labeled toy corpus: K-1 colored shapes over a textured background.

    Class identity determines shape kind and base color, so segmentation
    is learnable across images. Every class is visibly present (>= 16 px)
    in every image. Background is class 0.
    """
    h, w = size
    if k_classes < 2:
        raise ValueError(f"k_classes must be >= 2, got {k_classes}")
    if h < 16 or w < 16:
        raise ValueError(f"size must be at least 16x16, got {size}")
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    items = []
    for i in range(n_images):
        rng = np.random.default_rng((seed, i))
        img, seg = _gen_shapes_item(rng, h, w, k_classes, channels, min_px=16)
        items.append(CorpusItem(img, seg, split, i))
    return Corpus(items, k_classes, provenance=f"shapes(seed={seed})")


def add_gaussian_noise(img, sigma, seed):
    """Additive N(0, (sigma/255)^2) noise, i.i.d. per element, unclipped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(_seed_key(seed, 0xA0))
    eps = rng.standard_normal(img.shape, dtype=np.float32) * (sigma / 255.0)
    noisy = img.astype(np.float32) + eps if sigma > 0 else img.astype(np.float32).copy()
    return NoisySample(clean=img, noisy=noisy, sigma=float(sigma), seed=seed)


def sample_patches(corpus, patch, count, seed):
    """Uniform stride-1 patch positions pooled across all corpus images.

    Returns a list of (image_patch, segmap_patch_or_None); segmap patches
    are cropped at identical coordinates.
    """
    per_image = []
    for it in corpus.items:
        h, w = it.image.shape[:2]
        if patch > h or patch > w:
            raise ValueError(
                f"patch {patch} exceeds image {it.index} of size {h}x{w}"
            )
        per_image.append((h - patch + 1) * (w - patch + 1))
    cum = np.cumsum(per_image)
    rng = np.random.default_rng(_seed_key(seed, 0x9A))
    draws = rng.integers(0, cum[-1], size=count)
    out = []
    for d in draws:
        idx = int(np.searchsorted(cum, d, side="right"))
        local = int(d - (cum[idx - 1] if idx else 0))
        it = corpus.items[idx]
        wpos = it.image.shape[1] - patch + 1
        r, c = local // wpos, local % wpos
        seg = it.segmap[r : r + patch, c : c + patch] if it.segmap is not None else None
        out.append((it.image[r : r + patch, c : c + patch], seg))
    return out


def permute_blocks(seg, seed):
    """Uniformly permute the four quadrants (odd dims are cropped even)."""
    h, w = (seg.shape[0] // 2) * 2, (seg.shape[1] // 2) * 2
    seg = seg[:h, :w]
    h2, w2 = h // 2, w // 2
    quads = [seg[:h2, :w2], seg[:h2, w2:], seg[h2:, :w2], seg[h2:, w2:]]
    perm = np.random.default_rng(_seed_key(seed, 0xB1)).permutation(4)
    out = np.empty((h, w), seg.dtype)
    slots = [(slice(0, h2), slice(0, w2)), (slice(0, h2), slice(w2, w)),
             (slice(h2, h), slice(0, w2)), (slice(h2, h), slice(w2, w))]
    for slot, src in zip(slots, perm):
        out[slot] = quads[src]
    return out


def permute_pixels(seg, seed):
    """Uniformly permute all pixel locations."""
    rng = np.random.default_rng(_seed_key(seed, 0xB2))
    flat = seg.ravel()
    return flat[rng.permutation(flat.size)].reshape(seg.shape)


# ---------------------------------------------------------------- file I/O

_IMAGE_SUFFIXES = {".png", ".ppm", ".pgm"}


def _to_float(arr):
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.shape[2] == 4:
        a = a[:, :, :3]
    return (a.astype(np.float32)) / 255.0


def load_image_folder(path):
    """Corpus of unlabeled images from a folder of PNG / PPM / PGM files.

    Items are ordered by filename (lexicographic); unreadable files are
    skipped with a warning and counted in corpus.skipped_files.
    """
    folder = Path(path)
    if not folder.is_dir():
        raise FileNotFoundError(f"no such folder: {folder}")
    files = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{folder} contains no PNG/PPM/PGM files")
    items, skipped = [], 0
    for f in files:
        try:
            with PILImage.open(f) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = _to_float(np.asarray(im))
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {f.name}: {exc}")
            skipped += 1
            continue
        items.append(CorpusItem(arr, None, "test", len(items)))
    if not items:
        raise ValueError(f"{folder} contains no decodable images")
    return Corpus(items, None, provenance=str(folder), skipped_files=skipped)


def save_corpus(corpus, outdir, seed=None):
    """Write a corpus as images/NNNN.png, labels/NNNN.png and meta.json."""
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if any(it.segmap is not None for it in corpus.items):
        (out / "labels").mkdir(exist_ok=True)
    splits = {}
    for i, it in enumerate(corpus.items):
        name = f"{i:04d}.png"
        arr = np.clip(np.round(it.image * 255), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        PILImage.fromarray(arr).save(out / "images" / name)
        if it.segmap is not None:
            PILImage.fromarray(it.segmap.astype(np.uint8)).save(out / "labels" / name)
        splits[name] = it.split
    meta = {"k_classes": corpus.k_classes, "seed": seed, "split": splits,
            "provenance": corpus.provenance}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_corpus(indir):
    """Read back a corpus directory written by save_corpus."""
    root = Path(indir)
    meta = json.loads((root / "meta.json").read_text())
    items = []
    for i, name in enumerate(sorted(p.name for p in (root / "images").iterdir())):
        with PILImage.open(root / "images" / name) as im:
            img = _to_float(np.asarray(im))
        seg = None
        lab = root / "labels" / name
        if lab.exists():
            with PILImage.open(lab) as im:
                seg = np.asarray(im).astype(np.int32)
        items.append(CorpusItem(img, seg, meta["split"].get(name, "train"), i))
    return Corpus(items, meta.get("k_classes"), provenance=str(root))
