import math

import numpy as np
import pytest

from kbrerank.features import FeatureBundle
from kbrerank.neural import (
    RerankerDims,
    RerankerParams,
    backprop_batch,
    contrastive_loss,
    lstm_step,
    score,
    score_batch,
    sentence_representation,
    sgd_momentum_update,
    stack_bundles,
)

TINY = RerankerDims(
    vocab_size=20, word_dim=8, lstm_dim=8, hidden_dim=8,
    co_dim=4, freq_dim=4, cross_dim=4, intra_dim=4,
)


def tiny_instance(rng, n_candidates=6, length=4):
    ids = rng.integers(0, TINY.vocab_size, size=(n_candidates, length))
    bundles = [
        FeatureBundle(
            ngram_negative_logprob=float(rng.random() * 10),
            cooccurrence_bin=int(rng.integers(0, 10)),
            artist_freq_bin=int(rng.integers(0, 100)),
            song_freq_bin=int(rng.integers(0, 100)),
            cross_npmi_bin=int(rng.integers(0, 100)),
            intra_npmi_bin=int(rng.integers(0, 100)),
        )
        for _ in range(n_candidates)
    ]
    bins, feats = stack_bundles(bundles)
    return ids, bins, feats


from oracles import finite_difference_check


def check_gradients(params, loss_fn, grads, h=1e-5):
    bad = finite_difference_check(params, loss_fn, grads, h=h)
    assert bad is None, f"gradient mismatch in {bad}"


class TestLstmStep:
    def test_zero_everything_gives_zero_state(self):
        h, c = lstm_step(np.zeros((8, 4)), np.zeros(8), np.zeros(2), np.zeros(2), np.zeros(2))
        assert np.all(h == 0.0) and np.all(c == 0.0)

    def test_output_bounded(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(16, 9)) * 3
        b = rng.normal(size=16) * 3
        h, _ = lstm_step(w, b, rng.normal(size=4), rng.normal(size=4), rng.normal(size=5))
        assert np.all(np.abs(h) < 1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            lstm_step(np.zeros((8, 5)), np.zeros(8), np.zeros(2), np.zeros(2), np.zeros(2))


class TestRepresentation:
    def test_length_one(self):
        params = RerankerParams.initialize(TINY, seed=1)
        rep = sentence_representation(params, [3])
        assert rep.shape == (2 * TINY.lstm_dim,)

    def test_palindrome_with_tied_directions(self):
        params = RerankerParams.initialize(TINY, seed=2)
        params.tensors["bwd_w"] = params.tensors["fwd_w"].copy()
        params.tensors["bwd_b"] = params.tensors["fwd_b"].copy()
        rep = sentence_representation(params, [4, 9, 2, 9, 4])
        h = TINY.lstm_dim
        np.testing.assert_allclose(rep[:h], rep[h:], atol=1e-15)

    def test_zero_parameters_give_zero_vector(self):
        params = RerankerParams.initialize(TINY, seed=3)
        for t in params.tensors.values():
            t[:] = 0.0
        assert np.all(sentence_representation(params, [1, 2, 3]) == 0.0)


class TestScore:
    def test_alpha1_zero_passes_through_ngram_feature(self):
        params = RerankerParams.initialize(TINY, seed=4)
        params.tensors["alpha"][:] = (0.0, 2.0)
        bundle = FeatureBundle(3.5, 1, 2, 3, 4, 5)
        result = score(params, [1, 2, 3], bundle)
        assert math.isclose(result.u, 2.0 * 3.5, rel_tol=1e-12)

    def test_zero_output_vector_gives_zero_deep_score(self):
        params = RerankerParams.initialize(TINY, seed=5)
        params.tensors["out_w"][:] = 0.0
        bundle = FeatureBundle(1.0, 0, 0, 0, 0, 0)
        assert score(params, [1, 2], bundle).s == 0.0

    def test_out_of_range_bin_rejected(self):
        params = RerankerParams.initialize(TINY, seed=6)
        ids = np.array([[1, 2]])
        bins = {"co": np.array([10]), "artist": np.array([0]), "song": np.array([0]),
                "cross": np.array([0]), "intra": np.array([0])}
        with pytest.raises(ValueError, match="feature bin"):
            score_batch(params, ids, bins, np.array([1.0]))

    def test_dropout_deterministic_under_seed(self):
        params = RerankerParams.initialize(TINY, seed=7)
        rng = np.random.default_rng(0)
        ids, bins, feats = tiny_instance(rng)
        u1, _ = score_batch(params, ids, bins, feats, dropout_p=0.4, train_mode=True, seed=5)
        u2, _ = score_batch(params, ids, bins, feats, dropout_p=0.4, train_mode=True, seed=5)
        u3, _ = score_batch(params, ids, bins, feats, dropout_p=0.4, train_mode=True, seed=6)
        np.testing.assert_array_equal(u1, u2)
        assert not np.array_equal(u1, u3)

    def test_inference_ignores_dropout(self):
        params = RerankerParams.initialize(TINY, seed=8)
        rng = np.random.default_rng(1)
        ids, bins, feats = tiny_instance(rng)
        u1, _ = score_batch(params, ids, bins, feats, dropout_p=0.4, train_mode=False)
        u2, _ = score_batch(params, ids, bins, feats)
        np.testing.assert_array_equal(u1, u2)

    def test_batched_equals_single_candidate_scoring(self):
        params = RerankerParams.initialize(TINY, seed=9)
        rng = np.random.default_rng(2)
        ids, bins, feats = tiny_instance(rng)
        u, _ = score_batch(params, ids, bins, feats)
        for i in range(ids.shape[0]):
            bundle = FeatureBundle(
                feats[i], int(bins["co"][i]), int(bins["artist"][i]),
                int(bins["song"][i]), int(bins["cross"][i]), int(bins["intra"][i]),
            )
            single = score(params, ids[i], bundle)
            assert math.isclose(single.u, u[i], rel_tol=1e-12)


class TestGradients:
    def test_u_gradient_matches_finite_differences(self):
        params = RerankerParams.initialize(TINY, seed=10)
        rng = np.random.default_rng(3)
        ids, bins, feats = tiny_instance(rng, n_candidates=1, length=3)

        u, cache = score_batch(params, ids, bins, feats)
        grads = backprop_batch(params, cache, np.ones(1))

        def loss_fn():
            out, _ = score_batch(params, ids, bins, feats)
            return float(out[0])

        check_gradients(params, loss_fn, grads)

    def test_contrastive_loss_gradient_matches_finite_differences(self):
        params = RerankerParams.initialize(TINY, seed=11)
        rng = np.random.default_rng(4)
        ids, bins, feats = tiny_instance(rng, n_candidates=6, length=4)

        u, cache = score_batch(params, ids, bins, feats)
        _, du = contrastive_loss(u, 0)
        grads = backprop_batch(params, cache, du)

        def loss_fn():
            out, _ = score_batch(params, ids, bins, feats)
            return contrastive_loss(out, 0)[0]

        check_gradients(params, loss_fn, grads)


class TestContrastiveLoss:
    def test_uniform_scores(self):
        loss, grad = contrastive_loss([1.0] * 6, 0)
        assert math.isclose(loss, math.log(6.0), rel_tol=1e-12)
        np.testing.assert_allclose(grad[1:], 1.0 / 6.0, atol=1e-12)
        assert math.isclose(grad[0], 1.0 / 6.0 - 1.0, rel_tol=1e-12)

    def test_dominant_correct_score(self):
        loss, _ = contrastive_loss([500.0, 0.0, 0.0], 0)
        assert loss < 1e-12

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores = rng.normal(size=8) * 10
            loss, grad = contrastive_loss(scores, 3)
            p = grad.copy()
            p[3] += 1.0
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=6)
        _, g1 = contrastive_loss(scores, 2)
        _, g2 = contrastive_loss(scores + 123.456, 2)
        np.testing.assert_allclose(g1, g2, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            contrastive_loss([1.0, float("nan")], 0)

    def test_needs_two_candidates(self):
        with pytest.raises(ValueError):
            contrastive_loss([1.0], 0)


class TestSgdMomentum:
    def test_single_step(self):
        theta = {"x": np.array([2.0])}
        vel = {"x": np.array([0.0])}
        sgd_momentum_update(theta, {"x": np.array([1.0])}, vel, lr=1.0, momentum=0.9)
        assert vel["x"][0] == -1.0
        assert theta["x"][0] == 1.0

    def test_zero_gradient_coasts_on_momentum(self):
        theta = {"x": np.array([0.0])}
        vel = {"x": np.array([0.5])}
        sgd_momentum_update(theta, {"x": np.array([0.0])}, vel, lr=1.0, momentum=0.9)
        assert math.isclose(theta["x"][0], 0.45)

    def test_two_steps_closed_form(self):
        theta = {"x": np.array([0.0])}
        vel = {"x": np.array([0.0])}
        g = {"x": np.array([2.0])}
        sgd_momentum_update(theta, g, vel, lr=0.1, momentum=0.9)
        sgd_momentum_update(theta, g, vel, lr=0.1, momentum=0.9)
        assert math.isclose(vel["x"][0], -0.1 * 2.0 * (1.0 + 0.9), rel_tol=1e-12)

    def test_l2_pulls_toward_zero(self):
        theta = {"x": np.array([4.0])}
        vel = {"x": np.array([0.0])}
        sgd_momentum_update(theta, {"x": np.array([0.0])}, vel, lr=0.5, momentum=0.0, l2=0.1)
        assert theta["x"][0] == 4.0 - 0.5 * 0.1 * 4.0

    def test_deterministic_update_sequence(self):
        def run():
            params = RerankerParams.initialize(TINY, seed=12)
            vel = params.zero_grads()
            rng = np.random.default_rng(7)
            ids, bins, feats = tiny_instance(rng)
            for step in range(5):
                u, cache = score_batch(params, ids, bins, feats)
                _, du = contrastive_loss(u, 0)
                grads = backprop_batch(params, cache, du)
                sgd_momentum_update(params.tensors, grads, vel, 0.1, 0.9, 1e-6)
            return params

        a, b = run(), run()
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = RerankerParams.initialize(TINY, seed=13)
        path = tmp_path / "params.bin"
        params.save(path, vocab_hash="abc123")
        loaded, vocab_hash = RerankerParams.load(path)
        assert vocab_hash == "abc123"
        assert loaded.dims == params.dims
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], params.tensors[name])
