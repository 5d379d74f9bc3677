"""Tests for the Flipout layer, KL divergence, ELBO, and MC prediction."""

import numpy as np
import pytest

from advaudio import bayes, corpus, nn
from advaudio.bayes import (
    BnnClassifier,
    VariationalDense,
    elbo_loss,
    flipout_forward,
    kl_gaussian,
    mc_predict,
    softplus,
    softplus_inv,
    train_bnn,
)
from advaudio.nn import ClassifierModel, ModelSpec


def small_layer(n_in=4, n_out=3, sigma=0.3, seed=0):
    rng = np.random.default_rng(seed)
    return VariationalDense(
        mu_w=rng.standard_normal((n_in, n_out)),
        mu_b=rng.standard_normal(n_out),
        rho_w=np.full((n_in, n_out), softplus_inv(sigma)),
        rho_b=np.full(n_out, softplus_inv(sigma)),
    )


def tiny_bnn(seed=0, sigma_init=0.05):
    spec = ModelSpec(n_mels=6, channels=(3, 4), kernel=3, hidden=5)
    return BnnClassifier(spec, seed=seed, sigma_init=sigma_init)


class TestFlipoutForward:
    def test_zero_sigma_equals_mean_dense(self):
        layer = small_layer()
        layer.rho_w = np.full_like(layer.rho_w, -np.inf)
        layer.rho_b = np.full_like(layer.rho_b, -np.inf)
        x = np.random.default_rng(1).standard_normal((5, 4))
        out, _ = flipout_forward(layer, x, seed=3)
        np.testing.assert_array_equal(out, x @ layer.mu_w + layer.mu_b)

    def test_seed_determinism(self):
        layer = small_layer()
        x = np.random.default_rng(2).standard_normal((4, 4))
        out_a, _ = flipout_forward(layer, x, seed=77)
        out_b, _ = flipout_forward(layer, x, seed=77)
        assert out_a.tobytes() == out_b.tobytes()

    def test_identical_rows_get_different_samples(self):
        layer = small_layer(sigma=0.5)
        x = np.tile(np.random.default_rng(3).standard_normal(4), (2, 1))
        out, _ = flipout_forward(layer, x, seed=5)
        assert not np.allclose(out[0], out[1])

    def test_unbiased_over_seeds(self):
        # Monte-Carlo oracle: the seed-average must converge to the mu-only
        # output, within 3 standard errors per coordinate.
        layer = small_layer(sigma=0.4)
        x = np.random.default_rng(4).standard_normal((2, 4))
        expected = x @ layer.mu_w + layer.mu_b
        n = 10_000
        total = np.zeros((2, 3))
        total_sq = np.zeros((2, 3))
        for seed in range(n):
            out, _ = flipout_forward(layer, x, seed=seed)
            total += out
            total_sq += out**2
        mean = total / n
        se = np.sqrt((total_sq / n - mean**2) / n)
        np.testing.assert_array_less(np.abs(mean - expected), 3.0 * se + 1e-12)

    def test_cross_example_decorrelation(self):
        # Perturbation effects on two identical rows must be uncorrelated.
        layer = small_layer(sigma=0.5)
        x = np.tile(np.random.default_rng(5).standard_normal(4), (2, 1))
        base = x @ layer.mu_w + layer.mu_b
        n = 10_000
        p1 = np.empty(n)
        p2 = np.empty(n)
        for seed in range(n):
            out, _ = flipout_forward(layer, x, seed=seed)
            p1[seed] = out[0, 0] - base[0, 0]
            p2[seed] = out[1, 0] - base[1, 0]
        rho = np.corrcoef(p1, p2)[0, 1]
        assert abs(rho) <= 0.05


class TestKlGaussian:
    def test_zero_when_posterior_equals_prior(self):
        layer = small_layer()
        layer.mu_w = np.zeros_like(layer.mu_w)
        layer.mu_b = np.zeros_like(layer.mu_b)
        layer.rho_w = np.full_like(layer.rho_w, softplus_inv(1.0))
        layer.rho_b = np.full_like(layer.rho_b, softplus_inv(1.0))
        assert kl_gaussian(layer) == pytest.approx(0.0, abs=1e-12)

    def test_single_weight_half(self):
        layer = VariationalDense(
            mu_w=np.array([[1.0]]),
            mu_b=np.zeros(1),
            rho_w=np.array([[softplus_inv(1.0)]]),
            rho_b=np.array([softplus_inv(1.0)]),
        )
        assert kl_gaussian(layer) == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            layer = VariationalDense(
                mu_w=rng.standard_normal((2, 2)),
                mu_b=rng.standard_normal(2),
                rho_w=rng.uniform(-3, 2, (2, 2)),
                rho_b=rng.uniform(-3, 2, 2),
            )
            assert kl_gaussian(layer) >= 0.0

    def test_matches_monte_carlo_estimate(self):
        # MC oracle: KL = E_q[log q(w) - log p(w)] over 10^6 posterior draws.
        layer = VariationalDense(
            mu_w=np.array([[0.7, -0.4]]),
            mu_b=np.array([0.2]),
            rho_w=np.full((1, 2), softplus_inv(0.6)),
            rho_b=np.array([softplus_inv(1.3)]),
        )
        mus = np.concatenate([layer.mu_w.ravel(), layer.mu_b])
        sigmas = np.concatenate([layer.sigma_w().ravel(), layer.sigma_b()])
        rng = np.random.default_rng(123)
        n = 1_000_000
        w = mus + sigmas * rng.standard_normal((n, mus.size))
        log_q = -0.5 * ((w - mus) / sigmas) ** 2 - np.log(sigmas) - 0.5 * np.log(2 * np.pi)
        log_p = -0.5 * w**2 - 0.5 * np.log(2 * np.pi)
        per_draw = np.sum(log_q - log_p, axis=1)
        estimate = per_draw.mean()
        se = per_draw.std(ddof=1) / np.sqrt(n)
        assert abs(kl_gaussian(layer) - estimate) <= 3.0 * se


class TestElbo:
    def test_gradient_matches_finite_differences(self):
        # Fixed seed makes the stochastic loss a deterministic function of
        # the parameters; central differences are the oracle.
        model = tiny_bnn(seed=6, sigma_init=0.2)
        rng = np.random.default_rng(9)
        model.params[...] = rng.standard_normal(model.param_count) * 0.3
        feats = rng.standard_normal((3, 12, model.spec.n_mels))
        labels = rng.integers(0, 10, size=3)
        kl_weight = 0.01

        def loss_at(params):
            saved = model.params.copy()
            model.params[...] = params
            value, _ = elbo_loss(model, feats, labels,
                                 np.random.default_rng(42), kl_weight)
            model.params[...] = saved
            return value

        _, grad = elbo_loss(model, feats, labels, np.random.default_rng(42), kl_weight)
        eps = 1e-5
        coords = []
        for name in model.layout:
            offset, size = model.layout[name]
            coords.extend(offset + rng.choice(size, size=4, replace=False))
        base = model.params.copy()
        for coord in coords:
            up = base.copy()
            up[coord] += eps
            down = base.copy()
            down[coord] -= eps
            numeric = (loss_at(up) - loss_at(down)) / (2 * eps)
            assert grad[coord] == pytest.approx(numeric, rel=1e-3, abs=1e-7)

    def test_kl_weight_zero_is_sampled_cross_entropy(self):
        model = tiny_bnn(seed=7, sigma_init=0.1)
        rng = np.random.default_rng(10)
        feats = rng.standard_normal((2, 12, model.spec.n_mels))
        labels = np.array([1, 4])
        loss, _ = elbo_loss(model, feats, labels, np.random.default_rng(11), 0.0)
        pooled = model.pooled_from_features(feats)
        probs, _ = model.sample_probs_from_pooled(pooled, np.random.default_rng(11))
        nll = -np.mean(np.log(probs[np.arange(2), labels]))
        assert loss == pytest.approx(nll, abs=1e-12)

    def test_tiny_sigma_matches_deterministic_nll(self):
        # In the sigma -> 0 limit the NLL term equals the deterministic model's
        # cross-entropy (the KL term diverges, so it is excluded here).
        det = ClassifierModel(ModelSpec(n_mels=6, channels=(3, 4), kernel=3, hidden=5), seed=3)
        rng = np.random.default_rng(12)
        det.params[...] = rng.standard_normal(det.param_count) * 0.3
        bnn = BnnClassifier.from_deterministic(det, sigma_init=1e-6)
        feats = rng.standard_normal((3, 12, 6))
        labels = np.array([0, 5, 9])
        det_loss, _ = det.loss_and_grad_features(feats, labels)
        bnn_loss, _ = elbo_loss(bnn, feats, labels, np.random.default_rng(13), 0.0)
        assert bnn_loss == pytest.approx(det_loss, abs=1e-6)

    def test_empty_batch_rejected(self):
        model = tiny_bnn()
        with pytest.raises(ValueError, match="empty"):
            elbo_loss(model, np.zeros((0, 12, 6)), np.array([], dtype=int),
                      np.random.default_rng(0), 0.1)


class TestMcPredict:
    def test_zero_scale_collapses_all_passes(self):
        model = tiny_bnn(seed=8, sigma_init=0.3)
        rng = np.random.default_rng(14)
        model.params[...] = rng.standard_normal(model.param_count) * 0.2
        model.sigma_scale = 0.0
        wave = np.clip(rng.standard_normal(16000) * 0.1, -1, 1)
        _, hidden = mc_predict(model, wave, T=8, seed=1)
        np.testing.assert_allclose(np.std(hidden, axis=0), 0.0, atol=1e-15)

    def test_seed_reproducible(self):
        model = tiny_bnn(seed=8, sigma_init=0.2)
        rng = np.random.default_rng(15)
        wave = np.clip(rng.standard_normal(16000) * 0.1, -1, 1)
        mean_a, hidden_a = mc_predict(model, wave, T=6, seed=4)
        mean_b, hidden_b = mc_predict(model, wave, T=6, seed=4)
        assert mean_a.tobytes() == mean_b.tobytes()
        assert hidden_a.tobytes() == hidden_b.tobytes()

    def test_t_below_two_rejected(self):
        model = tiny_bnn()
        with pytest.raises(ValueError, match="T must be"):
            mc_predict(model, np.zeros(16000), T=1, seed=0)

    def test_mc_mean_converges(self):
        # total variation between T=1000 and T=10000 estimates stays small
        model = tiny_bnn(seed=9, sigma_init=0.3)
        rng = np.random.default_rng(16)
        model.params[...] = rng.standard_normal(model.param_count) * 0.4
        wave = np.clip(rng.standard_normal(16000) * 0.1, -1, 1)
        mean_small, _ = mc_predict(model, wave, T=1000, seed=2)
        mean_big, _ = mc_predict(model, wave, T=10000, seed=3)
        tv = 0.5 * np.sum(np.abs(mean_small - mean_big))
        assert tv <= 0.02


class TestWarmStartAndTraining:
    def test_degenerates_to_deterministic(self):
        det = ClassifierModel(seed=4)
        rng = np.random.default_rng(17)
        det.params[...] = rng.standard_normal(det.param_count) * 0.2
        det.set_feature_norm(rng.standard_normal(40), np.abs(rng.standard_normal(40)) + 0.5)
        bnn = BnnClassifier.from_deterministic(det)
        waves = np.clip(rng.standard_normal((3, 16000)) * 0.2, -1, 1)
        np.testing.assert_allclose(bnn.forward_batch(waves), det.forward_batch(waves),
                                   atol=1e-12)

    def test_train_determinism_and_checkpoint(self, tmp_path):
        manifest = corpus.generate_corpus(seed=31, per_class=10, out_dir=tmp_path / "c")
        det, _ = nn.train(ClassifierModel(seed=1), manifest,
                          nn.TrainConfig(epochs=3, seed=2))
        config = bayes.BnnTrainConfig(epochs=2, seed=5)
        bnn_a, _ = train_bnn(BnnClassifier.from_deterministic(det), manifest, config)
        bnn_b, _ = train_bnn(BnnClassifier.from_deterministic(det), manifest, config)
        assert bnn_a.params.tobytes() == bnn_b.params.tobytes()
        bayes.save_bnn(bnn_a, tmp_path / "bnn.ckpt")
        loaded = bayes.load_bnn(tmp_path / "bnn.ckpt")
        assert loaded.params.tobytes() == bnn_a.params.tobytes()
        assert loaded.prior_sigma == bnn_a.prior_sigma


class TestSoftplus:
    def test_inverse(self):
        for y in (0.05, 0.5, 1.0, 3.0):
            assert softplus(softplus_inv(y)) == pytest.approx(y, rel=1e-12)
