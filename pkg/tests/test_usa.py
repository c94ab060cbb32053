"""Awareness module: softmax/resolution contracts, entropy and cross
entropy closed forms, and gradient checks of the loss paths."""
import numpy as np
import pytest

from segaware import usa
from segaware.usa import (init_usa, usa_forward, forward_batch, backward_batch,
                          entropy_loss, entropy_from_probs_batch,
                          entropy_grad_logits, ce_loss, ce_loss_from_logits_batch,
                          ce_grad_logits, downsample_labels, softmax, ProbMap)
from conftest import numerical_grad, rel_err


class TestInit:
    def test_deterministic(self):
        e1, h1 = init_usa(64, 21, seed=1)
        e2, h2 = init_usa(64, 21, seed=1)
        np.testing.assert_array_equal(e1.w1, e2.w1)
        np.testing.assert_array_equal(e1.w2, e2.w2)
        np.testing.assert_array_equal(h1.w, h2.w)

    def test_pascal_convention_head(self):
        _, head = init_usa(64, 21, seed=0)
        assert head.k == 21
        assert head.w.shape == (3, 3, 64, 21)

    def test_embedding_frozen_by_default(self):
        emb, head = init_usa(8, 4, seed=0)
        assert emb.frozen and not head.trainable

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            init_usa(8, 1, seed=0)
        with pytest.raises(ValueError):
            init_usa(0, 4, seed=0)


class TestForward:
    def test_per_pixel_sums_to_one(self):
        emb, head = init_usa(16, 5, seed=2)
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        pm = usa_forward(emb, head, img)
        np.testing.assert_allclose(pm.probs.sum(axis=0), 1.0, atol=1e-6)
        assert (pm.probs >= 0).all()

    def test_zero_head_gives_uniform(self):
        emb, head = init_usa(16, 4, seed=3)
        head.w[:] = 0
        head.b[:] = 0
        img = np.random.default_rng(1).random((12, 12, 3)).astype(np.float32)
        pm = usa_forward(emb, head, img)
        np.testing.assert_allclose(pm.probs, 0.25, atol=1e-7)

    @pytest.mark.parametrize("hw,expect", [((8, 8), (2, 2)), ((64, 48), (16, 12)),
                                           ((9, 10), (3, 3))])
    def test_quarter_resolution(self, hw, expect):
        emb, head = init_usa(8, 3, seed=4)
        img = np.zeros(hw + (3,), np.float32)
        pm = usa_forward(emb, head, img)
        assert pm.probs.shape == (3,) + expect


class TestEntropy:
    def test_uniform_is_ln_k(self):
        pm = np.full((4, 5, 5), 0.25)
        assert abs(entropy_loss(pm) - np.log(4)) < 1e-9

    def test_one_hot_is_zero(self):
        pm = np.zeros((3, 4, 4))
        pm[1] = 1.0
        assert entropy_loss(pm) == 0.0

    def test_known_binary_value(self):
        pm = np.empty((2, 3, 3))
        pm[0], pm[1] = 0.75, 0.25
        assert abs(entropy_loss(pm) - 0.562335) < 1e-6

    def test_bounds_and_permutation_invariance(self):
        rng = np.random.default_rng(5)
        for k in (2, 4, 21):
            raw = rng.random((k, 6, 6))
            pm = raw / raw.sum(axis=0)
            h = entropy_loss(pm)
            assert 0.0 <= h <= np.log(k) + 1e-12
            perm = rng.permutation(k)
            assert abs(entropy_loss(pm[perm]) - h) < 1e-12

    def test_accepts_probmap(self):
        probs = np.full((2, 2, 2), 0.5)
        assert abs(entropy_loss(ProbMap(probs=probs)) - np.log(2)) < 1e-12


class TestCrossEntropy:
    def test_matching_one_hot_is_zero(self):
        z = np.zeros((3, 2, 2))
        z[1] = 50.0  # softmax ~ one-hot on class 1
        pm = ProbMap(probs=softmax(z, axis=0), logits=z)
        target = np.ones((2, 2), np.int64)
        assert ce_loss(pm, target) < 1e-12

    def test_uniform_is_ln_k(self):
        k = 21
        pm = ProbMap(probs=np.full((k, 3, 3), 1 / k), logits=np.zeros((k, 3, 3)))
        target = np.random.default_rng(6).integers(0, k, (3, 3))
        assert abs(ce_loss(pm, target) - np.log(21)) < 1e-9

    def test_matches_per_pixel_sum(self):
        rng = np.random.default_rng(7)
        z = rng.standard_normal((3, 2, 2))
        pm = ProbMap(probs=softmax(z, axis=0), logits=z)
        target = rng.integers(0, 3, (2, 2))
        brute = -sum(np.log(pm.probs[target[i, j], i, j])
                     for i in range(2) for j in range(2)) / 4
        assert abs(ce_loss(pm, target) - brute) < 1e-10

    def test_label_out_of_range_rejected(self):
        pm = ProbMap(probs=np.full((2, 2, 2), 0.5), logits=np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            ce_loss(pm, np.full((2, 2), 2))


class TestDownsample:
    def test_factor_one_identity(self):
        seg = np.arange(12).reshape(3, 4)
        np.testing.assert_array_equal(downsample_labels(seg, 1), seg)

    def test_constant_map(self):
        seg = np.full((8, 8), 3)
        out = downsample_labels(seg, 4)
        assert out.shape == (2, 2) and (out == 3).all()

    def test_anchor_at_origin(self):
        seg = np.arange(16).reshape(4, 4)
        np.testing.assert_array_equal(downsample_labels(seg, 4), [[0]])


class TestGradients:
    def test_entropy_grad_logits_matches_fd(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((1, 2, 2, 3))

        def loss():
            return entropy_from_probs_batch(softmax(z))

        got = entropy_grad_logits(softmax(z))
        want = numerical_grad(loss, z, eps=1e-5)
        assert rel_err(got, want) < 1e-4

    def test_ce_grad_logits_matches_fd(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((1, 2, 2, 4))
        target = rng.integers(0, 4, (1, 2, 2))

        def loss():
            return ce_loss_from_logits_batch(z, target)

        got = ce_grad_logits(softmax(z), target)
        want = numerical_grad(loss, z, eps=1e-5)
        assert rel_err(got, want) < 1e-4

    def test_entropy_through_module_input_grad(self):
        emb, head = init_usa(6, 3, seed=10, channels=2, dtype=np.float64)
        rng = np.random.default_rng(11)
        img = rng.random((1, 8, 8, 2))

        def loss():
            z, _ = forward_batch(emb, head, img)
            return entropy_from_probs_batch(softmax(z))

        z, cache = forward_batch(emb, head, img, keep_cache=True)
        dz = entropy_grad_logits(softmax(z))
        dimg, _, _ = backward_batch(emb, head, cache, dz)
        want = numerical_grad(loss, img, eps=1e-4)
        assert rel_err(dimg, want) < 1e-3

    def test_head_and_embedding_grads_match_fd(self):
        emb, head = init_usa(4, 3, seed=12, channels=1, dtype=np.float64)
        rng = np.random.default_rng(13)
        img = rng.random((1, 8, 8, 1))
        target = rng.integers(0, 3, (1, 2, 2))

        def loss():
            z, _ = forward_batch(emb, head, img)
            return ce_loss_from_logits_batch(z, target)

        z, cache = forward_batch(emb, head, img, keep_cache=True)
        dz = ce_grad_logits(softmax(z), target)
        _, hg, eg = backward_batch(emb, head, cache, dz,
                                   need_head_grads=True, need_emb_grads=True)
        for arr, got in [(head.w, hg["w"]), (head.b, hg["b"]),
                         (emb.w1, eg["w1"]), (emb.b1, eg["b1"]),
                         (emb.w2, eg["w2"]), (emb.b2, eg["b2"])]:
            want = numerical_grad(loss, arr, eps=1e-4)
            assert rel_err(got, want) < 1e-3


class TestWeightLoading:
    def test_wrong_shape_rejected_with_tensor_name(self, tmp_path):
        from segaware.checkpoint import save_checkpoint

        emb, head = init_usa(8, 4, seed=0)
        path = tmp_path / "usa.usaid"
        tensors = {"emb.w1": emb.w1, "emb.b1": emb.b1, "emb.w2": emb.w2,
                   "emb.b2": emb.b2, "head.w": np.zeros((3, 3, 8, 7), np.float32),
                   "head.b": head.b}
        save_checkpoint(path, tensors, {})
        with pytest.raises(ValueError, match="head.w"):
            init_usa(8, 4, seed=0, weights_path=path)
