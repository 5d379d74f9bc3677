"""Tests for the query oracle, constraints, and the three attack families."""

import numpy as np
import pytest

from advaudio import corpus
from advaudio.attacks import (
    AttackConfig,
    BudgetExhausted,
    QueryOracle,
    attack_loss,
    evolutionary_attack,
    gaussian_baseline,
    latent_upsample,
    project_linf,
    zeroth_order_attack,
    zo_gradient_estimate,
)
from advaudio.audio import AudioClip, measured_snr_db


def linear_stub_predict(seed=0, scale=1.0):
    """Cheap input-sensitive posterior: softmax of a linear map of the waveform."""
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((10, 160)) * scale

    def predict(waves):
        logits = waves[:, ::100] @ weights.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    return predict


def constant_predict(label=3):
    probs = np.full(10, 0.01)
    probs[label] = 0.91

    def predict(waves):
        return np.tile(probs, (waves.shape[0], 1))

    return predict


class OracleDouble:
    """Minimal recording stand-in: proves attacks use only the query surface."""

    def __init__(self, predict, budget):
        self._predict = predict
        self.budget = budget
        self.query_count = 0
        self.batch_sizes = []

    @property
    def remaining(self):
        return self.budget - self.query_count

    def query_batch(self, waves):
        waves = np.atleast_2d(waves)
        if self.query_count + waves.shape[0] > self.budget:
            raise BudgetExhausted("spent")
        self.query_count += waves.shape[0]
        self.batch_sizes.append(waves.shape[0])
        return self._predict(waves)

    def query(self, wave):
        return self.query_batch(np.asarray(wave)[None, :])[0]


@pytest.fixture(scope="module")
def chord_clip():
    return corpus.synthesize_clip(seed=101, label_index=4, clip_index=0)


class TestQueryOracle:
    def test_counter_starts_at_zero(self):
        oracle = QueryOracle(constant_predict(), budget=10)
        assert oracle.query_count == 0

    def test_budget_boundary(self):
        oracle = QueryOracle(constant_predict(), budget=10000)
        waves = np.zeros((500, 16000))
        for _ in range(20):
            oracle.query_batch(waves)
        assert oracle.query_count == 10000
        with pytest.raises(BudgetExhausted):
            oracle.query(np.zeros(16000))
        assert oracle.query_count == 10000  # the refused call consumed nothing

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            QueryOracle(constant_predict(), budget=0)

    def test_defense_wrapped_oracle_smooths_before_forward(self, chord_clip):
        from advaudio.detect import defense_wrap
        from advaudio.nn import ClassifierModel

        model = ClassifierModel(seed=2)
        rng = np.random.default_rng(0)
        model.params[...] = rng.standard_normal(model.param_count) * 0.1
        wrapped = defense_wrap(model, "ls", ls_window=3)
        oracle = QueryOracle(wrapped.forward_batch, budget=5)
        spiky = chord_clip.samples.copy()
        spiky[1000] = 0.9
        via_oracle = oracle.query(spiky)
        from advaudio.audio import local_smooth

        smoothed = local_smooth(AudioClip(spiky, 16000), 3)
        np.testing.assert_allclose(via_oracle, model.forward(smoothed), atol=1e-12)
        assert oracle.query_count == 1


class TestProjectLinf:
    def test_clamp_arithmetic(self):
        out = project_linf(np.array([0.5]), np.array([0.52]), 0.01)
        assert out[0] == pytest.approx(0.51)

    def test_inside_ball_unchanged(self):
        original = np.array([0.1, -0.2])
        candidate = np.array([0.105, -0.195])
        np.testing.assert_array_equal(project_linf(original, candidate, 0.01), candidate)

    def test_range_clamp_binds(self):
        out = project_linf(np.array([0.995]), np.array([1.01]), 0.01)
        assert out[0] == 1.0


class TestAttackLoss:
    def test_untargeted_margin(self):
        probs = np.array([0.9, 0.05, 0.01, 0.01, 0.01, 0.005, 0.005, 0.005, 0.0025, 0.0025])
        assert attack_loss(probs, "untargeted", 0) == pytest.approx(
            np.log(0.9) - np.log(0.05), abs=1e-9
        )

    def test_targeted_success_is_nonpositive(self):
        probs = np.full(10, 0.05)
        probs[4] = 0.55
        assert attack_loss(probs, "targeted", 4) <= 0.0

    def test_uniform_tie_is_zero(self):
        assert attack_loss(np.full(10, 0.1), "untargeted", 2) == pytest.approx(0.0, abs=1e-12)


class TestZoEstimator:
    def test_constant_function_gives_exact_zero(self):
        rng = np.random.default_rng(0)
        grad, _ = zo_gradient_estimate(lambda z: np.zeros(z.shape[0]) + 5.0,
                                       np.zeros(16), 1e-3, 32, rng)
        np.testing.assert_array_equal(grad, np.zeros(16))

    def test_linear_single_draw_identity(self):
        # For F(z) = a.z one draw gives exactly (a.u)u regardless of beta.
        rng = np.random.default_rng(1)
        a = rng.standard_normal(8)
        z0 = rng.standard_normal(8)
        for beta in (1e-6, 1e-3, 0.5):
            draw_rng = np.random.default_rng(7)
            grad, _ = zo_gradient_estimate(lambda z: z @ a, z0, beta, 1, draw_rng)
            check_rng = np.random.default_rng(7)
            u = check_rng.standard_normal((1, 8))
            u /= np.linalg.norm(u)
            np.testing.assert_allclose(grad, (a @ u[0]) * u[0], rtol=1e-9, atol=1e-12)

    def test_linear_mc_average_with_d_scaling(self):
        # Oracle: E[d (a.u) u] = a for uniform unit vectors; 3 SE tolerance.
        d = 8
        rng = np.random.default_rng(2)
        a = rng.standard_normal(d)
        draws = 100_000
        draw_rng = np.random.default_rng(3)
        directions = draw_rng.standard_normal((draws, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        samples = d * (directions @ a)[:, None] * directions
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
        est_rng = np.random.default_rng(3)
        grad, _ = zo_gradient_estimate(lambda z: z @ a, np.zeros(d), 1e-3, draws,
                                       est_rng, b_scale=d)
        np.testing.assert_allclose(grad, mean, rtol=1e-6, atol=1e-9)
        assert np.all(np.abs(grad - a) <= 3.0 * se)

    def test_quadratic_with_d_scaling(self):
        # F(z) = ||z||^2 / 2 has gradient z0; d-scaled estimate within 5%.
        d = 16
        rng = np.random.default_rng(4)
        z0 = rng.standard_normal(d)
        grad, _ = zo_gradient_estimate(
            lambda z: 0.5 * np.sum(z**2, axis=1), z0, 1e-3, 10_000,
            np.random.default_rng(5), b_scale=d,
        )
        assert np.linalg.norm(grad - z0) / np.linalg.norm(z0) <= 0.05


class TestLatentUpsample:
    def test_endpoint_and_interpolation(self):
        z = np.array([0.0, 1.0, 0.0])
        up = latent_upsample(z, 5)
        np.testing.assert_allclose(up, [0.0, 0.5, 1.0, 0.5, 0.0])

    def test_constant_preserved(self):
        up = latent_upsample(np.full(16, 0.7), 16000)
        np.testing.assert_allclose(up, 0.7)


class TestEvolutionaryAttack:
    def test_already_successful_member_returns_within_one_generation(self, chord_clip):
        oracle = OracleDouble(constant_predict(label=9), budget=1000)
        config = AttackConfig(delta_max=0.01, budget=1000, mode="untargeted", seed=0)
        result = evolutionary_attack(oracle, chord_clip, label=4, config=config)
        assert result.success
        assert result.queries_used <= config.population
        assert result.similarity >= 0.95

    def test_constraints_and_accounting(self, chord_clip):
        oracle = OracleDouble(linear_stub_predict(seed=5), budget=400)
        config = AttackConfig(delta_max=0.008, budget=400, seed=3)
        label = int(oracle.query(chord_clip.samples).argmax())
        oracle.query_count = 0
        oracle.batch_sizes.clear()
        result = evolutionary_attack(oracle, chord_clip, label, config)
        assert np.max(np.abs(result.clip.samples - chord_clip.samples)) <= 0.008 + 1e-12
        assert result.queries_used == oracle.query_count
        assert result.queries_used <= config.budget
        if result.success:
            assert result.similarity >= config.similarity_min

    def test_fitness_trace_monotone(self, chord_clip):
        oracle = OracleDouble(linear_stub_predict(seed=6, scale=0.05), budget=200)
        config = AttackConfig(delta_max=0.005, budget=200, seed=1)
        label = int(linear_stub_predict(seed=6, scale=0.05)(chord_clip.samples[None, :])[0].argmax())
        result = evolutionary_attack(oracle, chord_clip, label, config)
        trace = np.array(result.fitness_trace)
        assert trace.size >= 2
        assert np.all(np.diff(trace) >= -1e-12)

    def test_budget_exhaustion_is_a_result_not_an_error(self, chord_clip):
        oracle = OracleDouble(constant_predict(label=4), budget=65)
        config = AttackConfig(delta_max=0.01, budget=65, seed=2)
        result = evolutionary_attack(oracle, chord_clip, label=4, config=config)
        assert not result.success
        assert result.queries_used <= 65

    def test_seed_determinism(self, chord_clip):
        config = AttackConfig(delta_max=0.01, budget=150, seed=11)
        results = []
        for _ in range(2):
            oracle = OracleDouble(linear_stub_predict(seed=7), budget=150)
            results.append(evolutionary_attack(oracle, chord_clip, 0, config))
        assert results[0].clip.samples.tobytes() == results[1].clip.samples.tobytes()
        assert results[0].queries_used == results[1].queries_used
        assert results[0].loss_trace == results[1].loss_trace


class TestZerothOrderAttack:
    def test_success_on_linear_stub(self, chord_clip):
        predict = linear_stub_predict(seed=8, scale=0.3)
        label = int(predict(chord_clip.samples[None, :])[0].argmax())
        oracle = OracleDouble(predict, budget=5000)
        config = AttackConfig(delta_max=0.02, budget=5000, seed=4, step_size=0.1)
        result = zeroth_order_attack(oracle, chord_clip, label, config)
        assert result.success
        assert np.max(np.abs(result.clip.samples - chord_clip.samples)) <= 0.02 + 1e-12
        assert result.queries_used == oracle.query_count <= 5000

    def test_failure_keeps_constraints(self, chord_clip):
        oracle = OracleDouble(constant_predict(label=4), budget=100)
        config = AttackConfig(delta_max=0.01, budget=100, seed=5)
        result = zeroth_order_attack(oracle, chord_clip, label=4, config=config)
        assert not result.success
        assert result.queries_used <= 100
        assert np.max(np.abs(result.clip.samples - chord_clip.samples)) <= 0.01 + 1e-12

    def test_seed_determinism(self, chord_clip):
        config = AttackConfig(delta_max=0.01, budget=300, seed=6)
        outputs = []
        for _ in range(2):
            oracle = OracleDouble(linear_stub_predict(seed=9), budget=300)
            outputs.append(zeroth_order_attack(oracle, chord_clip, 0, config))
        assert outputs[0].clip.samples.tobytes() == outputs[1].clip.samples.tobytes()
        assert outputs[0].loss_trace == outputs[1].loss_trace

    def test_latent_dim_validation(self, chord_clip):
        oracle = OracleDouble(constant_predict(), budget=100)
        config = AttackConfig(latent_dim=20000, budget=100, seed=0)
        with pytest.raises(ValueError, match="latent_dim"):
            zeroth_order_attack(oracle, chord_clip, 0, config)


class TestGaussianBaseline:
    def test_snr_within_tolerance(self, chord_clip):
        noisy = gaussian_baseline(chord_clip, snr_db=10.0, seed=0)
        achieved = measured_snr_db(chord_clip.samples, noisy.samples - chord_clip.samples)
        assert achieved == pytest.approx(10.0, abs=0.1)

    def test_seed_determinism(self, chord_clip):
        a = gaussian_baseline(chord_clip, 10.0, seed=3)
        b = gaussian_baseline(chord_clip, 10.0, seed=3)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_high_snr_nearly_identity(self, chord_clip):
        # Oracle bound: at 100 dB the noise amplitude is ~1e-5 of signal RMS.
        noisy = gaussian_baseline(chord_clip, 100.0, seed=1)
        assert np.max(np.abs(noisy.samples - chord_clip.samples)) < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(delta_max=0.0)
        with pytest.raises(ValueError):
            AttackConfig(mode="targeted")
        with pytest.raises(ValueError):
            AttackConfig(similarity_min=0.0)
