"""Experiment harness: paired design, CSV determinism, aggregate
consistency, t-test calibration, and the runner-specific contracts."""
import numpy as np
import pytest

from segaware.data import generate_shapes_corpus
from segaware.denoiser import init_denoiser
from segaware.experiments import (ExperimentResult, aggregate_rows,
                                  paired_ttest, rows_to_csv,
                                  run_denoising_eval, run_downstream_seg,
                                  run_permutation_experiment, run_significance,
                                  significance_to_rows, steps_to_threshold,
                                  write_result)
from segaware.training import TrainConfig


@pytest.fixture(scope="module")
def testset():
    return generate_shapes_corpus(6, (48, 48), 4, seed=77, split="test")


class TestCsv:
    def test_formatting_and_sentinels(self, tmp_path):
        rows = [{"experiment": "e", "condition": "identity", "seed": 0,
                 "sigma": 0.0, "psnr": float("inf"), "ssim": 1.0},
                {"experiment": "e", "condition": "x", "seed": 1,
                 "sigma": 25.0, "psnr": 20.123456789}]
        path = tmp_path / "r.csv"
        rows_to_csv(rows, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0].startswith("experiment,condition,seed,sigma,psnr")
        assert ",inf," in lines[1]
        assert "20.1235" in lines[2]

    def test_aggregates_recompute_from_rows(self, testset):
        den = {"identity": "identity"}
        res = run_denoising_eval(den, testset, [15.0, 25.0], seed=3)
        for agg in res.aggregates:
            members = [r for r in res.rows
                       if r["condition"] == agg["condition"]
                       and r["sigma"] == agg["sigma"]]
            for col in ("psnr", "ssim", "entropy"):
                want = np.mean([m[col] for m in members])
                assert abs(agg[col] - want) < 1e-9


class TestDenoisingEval:
    def test_identity_psnr_near_2017_at_sigma25(self):
        big = generate_shapes_corpus(8, (96, 96), 4, seed=5, split="test")
        res = run_denoising_eval({"identity": "identity"}, big, [25.0], seed=1)
        agg = res.aggregates[0]
        assert agg["psnr"] == pytest.approx(20.17, abs=0.2)

    def test_sigma_zero_identity_is_inf(self, testset):
        res = run_denoising_eval({"identity": "identity"}, testset, [0.0], seed=2)
        assert all(np.isposinf(r["psnr"]) for r in res.rows)

    def test_oracle_always_inf(self, testset):
        res = run_denoising_eval({"oracle": "oracle"}, testset, [25.0], seed=2)
        assert all(np.isposinf(r["psnr"]) for r in res.rows)

    def test_rerun_byte_identical(self, testset, tmp_path):
        den = {"identity": "identity",
               "net": init_denoiser(2, 8, 3, seed=0)}
        out = []
        for tag in ("a", "b"):
            res = run_denoising_eval(den, testset, [25.0], seed=9)
            path = tmp_path / f"{tag}.csv"
            rows_to_csv(res.rows, path)
            out.append(path.read_bytes())
        assert out[0] == out[1]

    def test_paired_noise_across_conditions(self, testset):
        # identity's output equals the noisy input, so equal PSNR rows
        # across two identity conditions prove the noise was shared
        res = run_denoising_eval({"a": "identity", "b": "identity"},
                                 testset, [25.0], seed=4)
        a = [r["psnr"] for r in res.rows if r["condition"] == "a"]
        b = [r["psnr"] for r in res.rows if r["condition"] == "b"]
        assert a == b

    def test_write_result_layout(self, testset, tmp_path):
        res = run_denoising_eval({"identity": "identity"}, testset, [25.0],
                                 seed=5)
        write_result(res, tmp_path / "exp")
        assert (tmp_path / "exp" / "results.csv").exists()
        assert (tmp_path / "exp" / "rows.csv").exists()
        assert (tmp_path / "exp" / "meta.json").exists()


class TestStepsToThreshold:
    class _LB:
        def __init__(self, ce):
            self.ce = ce

    def _trace(self, values):
        return [(i, self._LB(v)) for i, v in enumerate(values)]

    def test_immediate_hit(self):
        tr = self._trace([0.1] * 40)
        assert steps_to_threshold(tr, 0.5, window=20) == 19

    def test_never_reached_is_inf(self):
        tr = self._trace([2.0] * 40)
        assert steps_to_threshold(tr, 0.5, window=20) == float("inf")

    def test_crossing_point(self):
        tr = self._trace([1.0] * 30 + [0.0] * 30)
        got = steps_to_threshold(tr, 0.49, window=20)
        assert 30 <= got <= 50


class TestPermutationExperiment:
    def test_constant_labels_make_arms_identical(self):
        c = generate_shapes_corpus(4, (32, 32), 3, seed=8)
        for it in c.items:
            it.segmap = np.zeros_like(it.segmap)
        c.k_classes = 3
        cfg = TrainConfig(mode="seg_supervised", k_classes=3, f_emb=16,
                          patch=16, batch_size=4, epochs=1, steps_per_epoch=8,
                          train_embedding=True, record_steps=True,
                          decay_epochs=(99,))
        res = run_permutation_experiment(cfg, c, thresholds=[0.5],
                                         seeds=[1, 2, 3])
        for s in (1, 2, 3):
            t = res.extras["curves"][("true", s)]
            assert res.extras["curves"][("blocks", s)] == t
            assert res.extras["curves"][("pixels", s)] == t

    def test_requires_labels_and_seeds(self):
        c = generate_shapes_corpus(2, (32, 32), 3, seed=9)
        cfg = TrainConfig(mode="seg_supervised", k_classes=3)
        with pytest.raises(ValueError, match="3 seeds"):
            run_permutation_experiment(cfg, c, [0.5], seeds=[1, 2])


class TestPairedTTest:
    def test_self_comparison_degenerate(self):
        x = np.random.default_rng(0).normal(size=20)
        res = paired_ttest(x, x)
        assert res["degenerate"] and res["p_value"] == 1.0

    def test_constant_shift_degenerate_zero_p(self):
        x = np.arange(10, dtype=np.float64)
        res = paired_ttest(x + 1.0, x)
        assert res["degenerate"] and res["p_value"] == 0.0

    def test_matches_scipy(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=15), rng.normal(size=15)
        from scipy import stats

        res = paired_ttest(a, b)
        t, p = stats.ttest_rel(a, b)
        assert res["t"] == pytest.approx(float(t), rel=1e-12)
        assert res["p_value"] == pytest.approx(float(p), rel=1e-12)

    def test_power_with_paired_injected_effect(self):
        # shared base + small independent jitter: the paired design the
        # harness uses; effect 0.5 in units of the stream std (~1).
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(100):
            base = rng.normal(0, 1, 10)
            a = base + rng.normal(0, 0.1, 10)
            b = base + 0.5 + rng.normal(0, 0.1, 10)
            if paired_ttest(b, a)["p_value"] < 0.05:
                hits += 1
        assert hits >= 95

    def test_null_type_one_error_rate(self):
        rng = np.random.default_rng(4)
        hits = 0
        trials = 500
        for _ in range(trials):
            a = rng.normal(0, 1, 10)
            b = rng.normal(0, 1, 10)
            if paired_ttest(a, b)["p_value"] < 0.05:
                hits += 1
        assert abs(hits / trials - 0.05) <= 0.03


class TestSignificanceRunner:
    def test_report_contract(self, testset):
        den = {"identity": "identity", "net": init_denoiser(2, 8, 3, seed=1)}
        rep = run_significance(den, testset, seed=6, n_noise=3)
        assert rep.samples["identity"].shape == (3, len(testset))
        assert all(v >= 0 for v in rep.variances.values())
        pair = rep.pairs[("identity", "net")]
        assert 0.0 <= pair["p_value"] <= 1.0
        rows = significance_to_rows(rep)
        assert any(r["condition"] == "identity-vs-net" for r in rows)

    def test_method_against_itself_p_one(self, testset):
        den = {"a": "identity", "b": "identity"}
        rep = run_significance(den, testset, seed=7, n_noise=2)
        assert rep.pairs[("a", "b")]["p_value"] == 1.0
        assert rep.pairs[("a", "b")]["degenerate"]

    def test_n_noise_lower_bound(self, testset):
        with pytest.raises(ValueError):
            run_significance({"a": "identity"}, testset, seed=0, n_noise=1)


class TestDownstream:
    @pytest.fixture(scope="class")
    def labeled(self):
        c = generate_shapes_corpus(10, (48, 48), 4, seed=12)
        for it in c.items[8:]:
            it.split = "test"
        return c

    def test_oracle_equals_clean_miou(self, labeled):
        cfg = TrainConfig(mode="seg_supervised", k_classes=4, f_emb=16,
                          patch=32, batch_size=4, epochs=1, steps_per_epoch=30,
                          decay_epochs=(99,))
        res = run_downstream_seg({"oracle": "oracle", "identity": "identity"},
                                 labeled, sigma=25.0, seed=13, seg_cfg=cfg)
        seg = res.extras["segmenter"]
        from segaware.experiments import predict_labels
        from segaware.metrics import miou
        from segaware.usa import downsample_labels

        test_items = labeled.subset("test").items
        want = np.mean([
            miou(predict_labels(seg, it.image), downsample_labels(it.segmap, 4), 4)
            for it in test_items
        ])
        got = [a for a in res.aggregates if a["condition"] == "oracle"][0]["miou"]
        assert got == pytest.approx(float(want), abs=1e-12)

    def test_requires_splits(self):
        c = generate_shapes_corpus(3, (48, 48), 3, seed=14)  # train only
        with pytest.raises(ValueError, match="splits"):
            run_downstream_seg({"identity": "identity"}, c, 25.0, seed=0)
