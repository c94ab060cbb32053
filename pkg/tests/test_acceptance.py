"""Acceptance criteria, one test per criterion, each printing a
PASS-style summary line with its measured values (run with -s to see
them live). The heavy mechanism runs share session-scoped fixtures.

Budgets: criterion 1 under one minute, criterion 4 under 30 CPU-minutes,
criterion 5 under 20; the suite asserts the outcome values and reports
wall times.
"""
import time

import numpy as np
import pytest

from segaware import denoiser as dn
from segaware import usa
from segaware.data import add_gaussian_noise, generate_shapes_corpus
from segaware.experiments import (paired_ttest, run_denoising_eval,
                                  run_downstream_seg,
                                  run_permutation_experiment, rows_to_csv,
                                  train_segmenter)
from segaware.metrics import miou, psnr, ssim
from segaware.model import build_model
from segaware.niqe import fit_aggd, fit_niqe, niqe
from segaware.training import TrainConfig, loss_and_grads, train
from conftest import numerical_grad, rel_err

MECH_SEEDS = (1, 2, 3)


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} — {detail}"
    print("\n" + line)
    return ok


# ------------------------------------------------------------ fixtures

@pytest.fixture(scope="session")
def labeled_corpus():
    """200 train + 50 test images, 64x64, K=6 (toy shapes)."""
    c = generate_shapes_corpus(200, (64, 64), 6, seed=0, split="train")
    test = generate_shapes_corpus(50, (64, 64), 6, seed=1000, split="test")
    c.items += test.items
    return c


def mechanism_config(mode, seed):
    # 2000 steps as 10 epochs x 200; decay placed late so both arms are
    # near their PSNR plateau inside the short budget
    return TrainConfig(mode=mode, k_classes=6, sigma_range=(25.0, 25.0),
                       batch_size=16, patch=48, epochs=10, steps_per_epoch=200,
                       decay_epochs=(4, 7, 9), seed=seed)


@pytest.fixture(scope="session")
def mechanism_runs(labeled_corpus):
    """Six trainings (3 seeds x {mse_only, usaid}); wall time recorded."""
    train_split = labeled_corpus.subset("train")
    test_split = labeled_corpus.subset("test")
    runs = {}
    t0 = time.perf_counter()
    for seed in MECH_SEEDS:
        for mode in ("mse_only", "usaid"):
            state, hist = train(mechanism_config(mode, seed), train_split,
                                val_corpus=test_split)
            runs[(mode, seed)] = state
    return {"runs": runs, "train_seconds": time.perf_counter() - t0,
            "test": test_split}


def _eval_psnr_entropy(state, test_split, eval_module, seed):
    """Mean test PSNR and mean prediction entropy at sigma 25."""
    emb, head = eval_module
    ps, ents = [], []
    for i, item in enumerate(test_split.items):
        ns = add_gaussian_noise(item.image, 25.0, seed=(0xEE, seed, i))
        y, _ = dn.forward_batch(state.denoiser, ns.noisy[None].astype(np.float32))
        ps.append(psnr(y[0], item.image))
        z, _ = usa.forward_batch(emb, head, y)
        ents.append(usa.entropy_from_probs_batch(usa.softmax(z)))
    return float(np.mean(ps)), float(np.mean(ents))


# ------------------------------------------------------------ criteria

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    tol, eps = 1e-3, 1e-4
    worst = 0.0

    # (a) mse o denoise_forward, depth-2/width-4, 8x8, float64
    cfg = TrainConfig(mode="mse_only", k_classes=2, depth=2, width=4,
                      channels=1, f_emb=8, batch_size=1, patch=8)
    state = build_model(cfg, dtype=np.float64)
    rng = np.random.default_rng(1)
    batch = {"clean": rng.random((1, 8, 8, 1)),
             "noisy": rng.random((1, 8, 8, 1))}

    def total_a():
        return loss_and_grads(state, batch, cfg)[0].total

    _, grads = loss_and_grads(state, batch, cfg)
    for name, g in grads.items():
        worst = max(worst, rel_err(g, numerical_grad(
            total_a, state.named_tensors()[name], eps)))

    # (b) entropy o usa_forward w.r.t. module input and head weights
    emb, head = usa.init_usa(8, 2, seed=2, channels=1, dtype=np.float64)
    img = rng.random((1, 8, 8, 1))

    def total_b():
        z, _ = usa.forward_batch(emb, head, img)
        return usa.entropy_from_probs_batch(usa.softmax(z))

    z, cache = usa.forward_batch(emb, head, img, keep_cache=True)
    dz = usa.entropy_grad_logits(usa.softmax(z))
    dimg, head_g, _ = usa.backward_batch(emb, head, cache, dz,
                                         need_head_grads=True)
    worst = max(worst, rel_err(dimg, numerical_grad(total_b, img, eps)))
    worst = max(worst, rel_err(head_g["w"], numerical_grad(total_b, head.w, eps)))

    # (c) the full composite w.r.t. denoiser parameters
    cfg_c = TrainConfig(mode="usaid", k_classes=2, depth=2, width=4,
                        channels=1, f_emb=8, batch_size=1, patch=8, seed=3)
    state_c = build_model(cfg_c, dtype=np.float64)

    def total_c():
        return loss_and_grads(state_c, batch, cfg_c)[0].total

    _, grads_c = loss_and_grads(state_c, batch, cfg_c)
    for name, g in grads_c.items():
        worst = max(worst, rel_err(g, numerical_grad(
            total_c, state_c.named_tensors()[name], eps)))

    dt = time.perf_counter() - t0
    ok = worst < tol and dt < 60
    assert report(1, ok, f"max FD relative error {worst:.2e} (tol {tol}), "
                         f"runtime {dt:.1f}s (< 60s)")


def test_criterion_2_entropy_law():
    rng = np.random.default_rng(4)
    checked = 0
    for k in (2, 4, 21):
        raw = rng.random((3334, k, 5, 5))
        pm = raw / raw.sum(axis=1, keepdims=True)
        for probs in pm:
            h = usa.entropy_loss(probs)
            assert 0.0 <= h <= np.log(k) + 1e-12
            checked += 1
        # channel-permutation invariance, exact
        probs = pm[0]
        perm = rng.permutation(k)
        assert usa.entropy_loss(probs[perm]) == usa.entropy_loss(probs)
        # uniform exact to 1e-9; one-hot exact 0
        assert abs(usa.entropy_loss(np.full((k, 4, 4), 1.0 / k)) - np.log(k)) < 1e-9
        onehot = np.zeros((k, 4, 4))
        onehot[0] = 1.0
        assert usa.entropy_loss(onehot) == 0.0
    assert report(2, True, f"{checked} random ProbMaps within [0, ln K]; "
                           "uniform/one-hot/permutation laws exact")


def test_criterion_3_closed_form_metrics():
    a = np.full((32, 32, 3), 0.4)
    p_gap = psnr(a, a + 0.1)
    s_same = ssim(a, a)
    s_const = ssim(np.full((16, 16, 1), 0.5), np.full((16, 16, 1), 0.6))
    gt = np.zeros((10, 10), np.int64)
    gt[5:] = 1
    m_case = miou(np.zeros_like(gt), gt, 2)

    big = generate_shapes_corpus(8, (128, 128), 4, seed=6, split="test")
    noisy_psnrs = [psnr(add_gaussian_noise(it.image, 25.0, seed=i).noisy, it.image)
                   for i, it in enumerate(big.items)]
    noisy_mean = float(np.mean(noisy_psnrs))

    ok = (abs(p_gap - 20.0) < 1e-9 and s_same == 1.0
          and abs(s_const - 0.98362) < 1e-4 and m_case == 0.25
          and abs(noisy_mean - 20.17) < 0.2)
    assert report(3, ok, f"psnr(0.1 gap)={p_gap:.12f}, ssim(id)={s_same}, "
                         f"ssim(const)={s_const:.6f}, miou={m_case}, "
                         f"noisy@25={noisy_mean:.3f} dB (20.17±0.2)")


def test_criterion_4_mechanism_effect(mechanism_runs):
    runs = mechanism_runs["runs"]
    test_split = mechanism_runs["test"]
    details, ok = [], True
    for seed in MECH_SEEDS:
        eval_module = usa.init_usa(64, 6, seed=seed, channels=3)
        pm, em = _eval_psnr_entropy(runs[("mse_only", seed)], test_split,
                                    eval_module, seed)
        pu, eu = _eval_psnr_entropy(runs[("usaid", seed)], test_split,
                                    eval_module, seed)
        noisy = float(np.mean([
            psnr(add_gaussian_noise(it.image, 25.0, seed=(0xEE, seed, i)).noisy,
                 it.image)
            for i, it in enumerate(test_split.items)]))
        gain = pm - noisy
        gap = pu - pm
        ent_ok = eu < em
        seed_ok = gain >= 2.0 and ent_ok and abs(gap) <= 0.5
        ok &= seed_ok
        details.append(f"seed {seed}: mse {pm:.2f} dB (noisy+{gain:.2f}), "
                       f"usaid gap {gap:+.3f} dB, "
                       f"entropy {eu:.6f} vs {em:.6f} "
                       f"({'<' if ent_ok else '>='})")
    dt = mechanism_runs["train_seconds"]
    ok &= dt < 1800
    assert report(4, ok, f"train time {dt:.0f}s (< 1800s); " + "; ".join(details))


def test_criterion_5_permuted_supervision_ordering(labeled_corpus):
    t0 = time.perf_counter()
    k = 6
    tau = 0.5 * np.log(k)
    cfg = TrainConfig(mode="seg_supervised", k_classes=k, batch_size=16,
                      patch=48, epochs=2, steps_per_epoch=300,
                      decay_epochs=(1,), train_embedding=True,
                      record_steps=True)
    res = run_permutation_experiment(cfg, labeled_corpus.subset("train"),
                                     thresholds=[tau],
                                     seeds=[1, 2, 3, 4, 5])
    med = {arm: res.meta["median_steps"][arm][tau] for arm in
           ("true", "blocks", "pixels")}
    dt = time.perf_counter() - t0
    ok = (med["true"] <= med["blocks"] <= med["pixels"]
          and med["true"] < med["pixels"] and dt < 1200)
    assert report(5, ok, f"median steps to tau={tau:.3f}: true={med['true']}, "
                         f"blocks={med['blocks']}, pixels={med['pixels']}; "
                         f"runtime {dt:.0f}s (< 1200s)")


def test_criterion_6_downstream_direction(mechanism_runs, labeled_corpus):
    runs = mechanism_runs["runs"]
    seed = MECH_SEEDS[0]
    segmenter, _ = train_segmenter(labeled_corpus.subset("train"), 6, seed=99)
    wins = 0
    pairs = []
    for draw in range(10):
        res = run_downstream_seg(
            {"usaid": runs[("usaid", seed)].denoiser,
             "mse_only": runs[("mse_only", seed)].denoiser},
            labeled_corpus, sigma=25.0, seed=1234, noise_tag=draw,
            segmenter=segmenter)
        agg = {a["condition"]: a["miou"] for a in res.aggregates}
        pairs.append((agg["usaid"], agg["mse_only"]))
        wins += agg["usaid"] >= agg["mse_only"]
    mean_u = np.mean([p[0] for p in pairs])
    mean_m = np.mean([p[1] for p in pairs])
    ok = wins >= 6
    assert report(6, ok, f"usaid mIoU >= mse_only in {wins}/10 noise draws "
                         f"(means {mean_u:.4f} vs {mean_m:.4f})")


def test_criterion_7_niqe_ordering():
    # AGGD shape recovery on a known distribution
    alpha, bl, br = fit_aggd(np.random.default_rng(7).standard_normal(100_000))
    aggd_ok = 1.8 <= alpha <= 2.2

    pristine = generate_shapes_corpus(125, (64, 64), 5, seed=40)
    model = fit_niqe(pristine, patch=48)  # 500 raw patches, top 75% kept
    test = generate_shapes_corpus(20, (64, 64), 5, seed=41, split="test")
    wins = 0
    for i, it in enumerate(test.items):
        noisy = add_gaussian_noise(it.image, 50.0, seed=(0x7E, i)).noisy
        wins += niqe(it.image, model) < niqe(noisy, model)
    ok = aggd_ok and wins >= 18
    assert report(7, ok, f"AGGD alpha={alpha:.3f} in [1.8, 2.2]; "
                         f"clean<noisy NIQE in {wins}/20 images "
                         f"(model on {model.n_patches} kept patches)")


def test_criterion_8_significance_and_reproducibility(tmp_path):
    # power: paired streams share their base noise (the harness design)
    rng = np.random.default_rng(8)
    power_hits = 0
    for _ in range(100):
        base = rng.normal(0, 1, 10)
        a = base + rng.normal(0, 0.1, 10)
        b = base + 0.5 + rng.normal(0, 0.1, 10)
        power_hits += paired_ttest(b, a)["p_value"] < 0.05
    null_hits = 0
    for _ in range(500):
        if paired_ttest(rng.normal(0, 1, 10), rng.normal(0, 1, 10))["p_value"] < 0.05:
            null_hits += 1
    null_rate = null_hits / 500

    # checkpoint bitwise round trip
    from segaware.model import load_state, save_state

    cfg = TrainConfig(mode="usaid", k_classes=3, depth=2, width=4, f_emb=8)
    state = build_model(cfg)
    save_state(tmp_path / "m.usaid", state, {"train_config": cfg.to_dict()})
    back, _ = load_state(tmp_path / "m.usaid")
    roundtrip_ok = all(
        back.named_tensors()[n].tobytes() == t.tobytes()
        for n, t in state.named_tensors().items()
    )

    # byte-identical experiment rerun
    testset = generate_shapes_corpus(5, (48, 48), 4, seed=42, split="test")
    blobs = []
    for tag in ("a", "b"):
        res = run_denoising_eval({"identity": "identity"}, testset, [25.0],
                                 seed=77)
        rows_to_csv(res.rows + res.aggregates, tmp_path / f"{tag}.csv")
        blobs.append((tmp_path / f"{tag}.csv").read_bytes())
    rerun_ok = blobs[0] == blobs[1]

    ok = (power_hits >= 95 and abs(null_rate - 0.05) <= 0.03
          and roundtrip_ok and rerun_ok)
    assert report(8, ok, f"power {power_hits}/100 (>=95), "
                         f"type-I {null_rate:.3f} (0.05±0.03), "
                         f"roundtrip={'bitwise' if roundtrip_ok else 'FAIL'}, "
                         f"rerun={'identical' if rerun_ok else 'FAIL'}")
