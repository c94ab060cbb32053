"""Experiment runners: denoising evaluation, K ablation, permuted-label
convergence, downstream segmentation, and the significance study.

Every runner is a pure function of (inputs, seed) and uses a paired
noise design: within one experiment, all methods see identical noise
realizations per image, which sharpens small-sample comparisons.
Results are emitted as CSV with a fixed column set; reruns with the same
seed produce byte-identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import denoiser as dn
from . import usa
from .data import add_gaussian_noise
from .metrics import miou, psnr, ssim
from .niqe import niqe as niqe_score
from .training import TrainConfig, train
from .usa import downsample_labels

CSV_COLUMNS = ("experiment", "condition", "seed", "sigma", "psnr", "ssim",
               "niqe", "entropy", "miou", "p_value")


@dataclass
class ExperimentResult:
    experiment: str
    rows: list = field(default_factory=list)        # per-unit dict rows
    aggregates: list = field(default_factory=list)  # mean rows
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)      # runner-specific payloads


@dataclass
class SignificanceReport:
    n_noise: int
    samples: dict                 # method -> (n_noise, n_images) scores
    variances: dict               # method -> variance of per-draw means
    pairs: dict                   # (a, b) -> dict(t, p_value, mean_diff, ...)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isposinf(v):
        return "inf"
    if np.isneginf(v):
        return "-inf"
    if np.isnan(v):
        return ""
    return f"{v:.6g}"


def rows_to_csv(rows, path):
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def write_result(result: ExperimentResult, outdir):
    """results.csv (aggregates), rows.csv (raw), meta.json."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows_to_csv(result.aggregates, out / "results.csv")
    rows_to_csv(result.rows, out / "rows.csv")
    (out / "meta.json").write_text(json.dumps(result.meta, indent=1,
                                              sort_keys=True, default=str))


def aggregate_rows(rows, keys=("experiment", "condition", "sigma")):
    """Mean of numeric columns over rows sharing the key columns."""
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row.get(k) for k in keys), []).append(row)
    out = []
    for keyvals, members in groups.items():
        agg = dict(zip(keys, keyvals))
        for col in ("psnr", "ssim", "niqe", "entropy", "miou", "p_value"):
            vals = [r[col] for r in members if r.get(col) is not None]
            if vals:
                agg[col] = float(np.mean(vals))
        out.append(agg)
    return out


def apply_denoiser(den, noisy):
    """den is DenoiserParams, 'identity' (returns input) or 'oracle'."""
    if isinstance(den, str):
        if den == "identity":
            return noisy
        raise ValueError(f"unknown pseudo-denoiser {den!r}")
    y, _ = dn.forward_batch(den, noisy[None].astype(np.float32))
    return y[0]


def _eval_usa_module(k_classes, channels=3, seed=0):
    return usa.init_usa(64, k_classes, seed=seed, channels=channels)


def run_denoising_eval(denoisers: dict, testset, sigmas, seed,
                       niqe_model=None, eval_usa=None, k_classes=6):
    """PSNR/SSIM/NIQE/entropy for each (denoiser, sigma) on shared noise.

    denoisers maps condition names to DenoiserParams, 'identity', or
    'oracle' (the clean image). Entropy is measured with one fixed
    evaluation head shared by every condition.
    """
    if len(testset) == 0:
        raise ValueError("test corpus is empty")
    if eval_usa is None:
        channels = testset.items[0].image.shape[2]
        eval_usa = _eval_usa_module(k_classes, channels, seed=0)
    emb, head = eval_usa
    result = ExperimentResult("denoising_eval",
                              meta={"sigmas": list(sigmas), "seed": seed,
                                    "conditions": list(denoisers)})
    for sigma in sigmas:
        for i, item in enumerate(testset.items):
            ns = add_gaussian_noise(item.image, sigma,
                                    seed=(seed, 0xE1, i, int(round(sigma * 16))))
            for name, den in denoisers.items():
                out = item.image if den == "oracle" else apply_denoiser(den, ns.noisy)
                row = {"experiment": "denoising_eval", "condition": name,
                       "seed": i, "sigma": sigma,
                       "psnr": psnr(out, item.image),
                       "ssim": ssim(out, item.image)}
                if niqe_model is not None:
                    row["niqe"] = niqe_score(out, niqe_model)
                z, _ = usa.forward_batch(emb, head, out[None].astype(np.float32))
                row["entropy"] = usa.entropy_from_probs_batch(usa.softmax(z))
                result.rows.append(row)
    result.aggregates = aggregate_rows(result.rows)
    return result


def run_k_ablation(ks, cfg: TrainConfig, corpus, testset, seed,
                   niqe_model=None):
    """Train one awareness-regularized denoiser per K, evaluate at sigma 25."""
    if any(k < 2 for k in ks):
        raise ValueError("all ks must be >= 2")
    result = ExperimentResult("k_ablation", meta={"ks": list(ks), "seed": seed,
                                                  "failed": {}})
    for k in ks:
        cond = f"K={k}"
        try:
            cfg_k = replace(cfg, mode="usaid", k_classes=k, seed=seed)
            state, _ = train(cfg_k, corpus)
            ev = run_denoising_eval({cond: state.denoiser}, testset, [25.0],
                                    seed=seed, niqe_model=niqe_model,
                                    eval_usa=(state.emb, state.head))
            for row in ev.rows:
                row["experiment"] = "k_ablation"
                result.rows.append(row)
        except Exception as exc:  # keep sweeping, mark the row failed
            result.meta["failed"][cond] = repr(exc)
            result.rows.append({"experiment": "k_ablation", "condition": cond,
                                "seed": seed, "sigma": 25.0})
    result.aggregates = aggregate_rows(result.rows)
    return result


def steps_to_threshold(step_losses, tau, window=20):
    """First step whose windowed-mean CE drops to tau; inf if never."""
    ce = np.array([lb.ce for _, lb in step_losses])
    if ce.size == 0:
        return float("inf")
    kernel = np.ones(window) / window
    smooth = np.convolve(ce, kernel, mode="valid")
    hits = np.nonzero(smooth <= tau)[0]
    return float(hits[0] + window - 1) if hits.size else float("inf")


PERMUTE_ARMS = {"true": "seg_supervised",
                "blocks": "seg_permuted_blocks",
                "pixels": "seg_permuted_pixels"}


def run_permutation_experiment(cfg: TrainConfig, labeled_corpus, thresholds,
                               seeds):
    """Supervised segmenter convergence against true vs permuted targets.

    All three arms share initialization and data order within one seed.
    Steps-to-threshold uses a 20-step moving average of the batch CE;
    arms that never reach a threshold get an inf sentinel.
    """
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    if any(it.segmap is None for it in labeled_corpus.items):
        raise ValueError("permutation experiment needs a labeled corpus")
    result = ExperimentResult("permutation_convergence",
                              meta={"thresholds": list(thresholds),
                                    "seeds": list(seeds)})
    curves = {}
    steps = {arm: {float(t): [] for t in thresholds} for arm in PERMUTE_ARMS}
    for s in seeds:
        for arm, mode in PERMUTE_ARMS.items():
            cfg_arm = replace(cfg, mode=mode, seed=s, record_steps=True)
            _, hist = train(cfg_arm, labeled_corpus)
            curves[(arm, s)] = [float(lb.ce) for _, lb in hist.step_losses]
            final_ce = hist.records[-1].loss.ce
            result.rows.append({"experiment": "permutation_convergence",
                                "condition": arm, "seed": s,
                                "entropy": final_ce})
            for t in thresholds:
                steps[arm][float(t)].append(
                    steps_to_threshold(hist.step_losses, t))
    result.aggregates = aggregate_rows(result.rows,
                                       keys=("experiment", "condition"))
    result.extras["curves"] = curves
    result.extras["steps_to_threshold"] = steps
    result.meta["median_steps"] = {
        arm: {t: float(np.median(v)) for t, v in by_t.items()}
        for arm, by_t in steps.items()
    }
    return result


def train_segmenter(labeled_corpus, k_classes, seed, cfg=None):
    """Small supervised segmenter (embedding + head, both trainable)."""
    base = cfg or TrainConfig(mode="seg_supervised", epochs=4,
                              steps_per_epoch=150, decay_epochs=(2, 3),
                              batch_size=16, patch=48)
    cfg_s = replace(base, mode="seg_supervised", k_classes=k_classes,
                    seed=seed, train_embedding=True, train_head=True)
    state, hist = train(cfg_s, labeled_corpus)
    return state, hist


def predict_labels(seg_state, img):
    z, _ = usa.forward_batch(seg_state.emb, seg_state.head,
                             img[None].astype(np.float32))
    return np.argmax(z[0], axis=-1)


def run_downstream_seg(denoisers: dict, labeled_corpus, sigma, seed,
                       seg_cfg=None, noise_tag=0, segmenter=None):
    """mIoU of a clean-trained segmenter on denoised noisy test images.

    Ground truth is compared at the prediction resolution (1/4, nearest
    subsampling). Includes whatever pseudo-denoisers the caller lists
    ('identity' for no denoising, 'oracle' for the clean image). Pass a
    pre-trained segmenter to share it across repeated noise draws.
    """
    k = labeled_corpus.k_classes
    train_split = labeled_corpus.subset("train")
    test_split = labeled_corpus.subset("test")
    if len(test_split) == 0 or (segmenter is None and len(train_split) == 0):
        raise ValueError("downstream experiment needs train and test splits")
    seg_state = segmenter
    if seg_state is None:
        seg_state, _ = train_segmenter(train_split, k, seed, seg_cfg)
    result = ExperimentResult("downstream_seg",
                              meta={"sigma": sigma, "seed": seed,
                                    "k_classes": k})
    for i, item in enumerate(test_split.items):
        ns = add_gaussian_noise(item.image, sigma, seed=(seed, 0xD5, noise_tag, i))
        gt = downsample_labels(item.segmap, 4)
        for name, den in denoisers.items():
            out = item.image if den == "oracle" else apply_denoiser(den, ns.noisy)
            pred = predict_labels(seg_state, out)
            result.rows.append({"experiment": "downstream_seg",
                                "condition": name, "seed": i, "sigma": sigma,
                                "miou": miou(pred, gt, k)})
    result.aggregates = aggregate_rows(result.rows)
    result.extras["segmenter"] = seg_state
    return result


def paired_ttest(a, b):
    """Two-sided paired t test; degenerate zero-variance cases flagged."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        return {"t": float("inf") if mean != 0 else 0.0,
                "p_value": 0.0 if mean != 0 else 1.0,
                "mean_diff": mean, "n": n, "degenerate": True}
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 1))
    return {"t": float(t), "p_value": p, "mean_diff": mean, "n": n,
            "degenerate": False}


def run_significance(denoisers: dict, testset, seed, sigma=25.0, n_noise=10,
                     metric="psnr", eval_usa=None, k_classes=6):
    """Repeat the denoising evaluation over n_noise fresh noise draws.

    Per method: scores shaped (n_noise, n_images); reported variance is
    the variance of per-draw mean scores over the noise draws (stated in
    the CSV header notes). Pairs get two-sided paired t tests over the
    pooled per-image-per-draw differences.
    """
    if n_noise < 2:
        raise ValueError("n_noise must be >= 2")
    names = list(denoisers)
    scores = {m: np.zeros((n_noise, len(testset))) for m in names}
    for d in range(n_noise):
        for i, item in enumerate(testset.items):
            ns = add_gaussian_noise(item.image, sigma, seed=(seed, 0x51, d, i))
            for name in names:
                den = denoisers[name]
                out = item.image if den == "oracle" else apply_denoiser(den, ns.noisy)
                if metric == "psnr":
                    scores[name][d, i] = psnr(out, item.image)
                elif metric == "ssim":
                    scores[name][d, i] = ssim(out, item.image)
                else:
                    raise ValueError(f"unsupported metric {metric!r}")
    variances = {m: float(scores[m].mean(axis=1).var(ddof=1)) for m in names}
    pairs = {}
    for ai in range(len(names)):
        for bi in range(ai + 1, len(names)):
            a, b = names[ai], names[bi]
            pairs[(a, b)] = paired_ttest(scores[a], scores[b])
    return SignificanceReport(n_noise=n_noise, samples=scores,
                              variances=variances, pairs=pairs)


def significance_to_rows(report, sigma=25.0):
    rows = []
    for m, var in report.variances.items():
        rows.append({"experiment": "significance", "condition": m,
                     "sigma": sigma, "psnr": float(report.samples[m].mean()),
                     "p_value": None, "entropy": None})
    for (a, b), res in report.pairs.items():
        rows.append({"experiment": "significance",
                     "condition": f"{a}-vs-{b}", "sigma": sigma,
                     "p_value": res["p_value"]})
    return rows
