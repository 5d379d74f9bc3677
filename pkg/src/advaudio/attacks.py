"""Query-only adversarial audio generation.

Attacks see the target model exclusively through a QueryOracle (input in,
posterior out, hard budget); there is no parameter or gradient channel.
Implemented families: evolutionary search with an MFCC-similarity
constraint, zeroth-order latent optimization with finite-difference
gradient estimates, and an additive-Gaussian control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, MfccSimilarity, measured_snr_db, scale_noise_to_snr


class BudgetExhausted(Exception):
    """Terminal attack-stop signal: the oracle's query budget is spent."""


class QueryOracle:
    """Black-box wrapper around a model: waveforms in, posteriors out.

    Every waveform scored counts one query against the budget; a call that
    would cross the budget raises BudgetExhausted without consuming queries.
    """

    def __init__(self, predict_batch, budget: int):
        if budget <= 0:
            raise ValueError(f"budget must be positive, got {budget}")
        self._predict_batch = predict_batch
        self.budget = budget
        self.query_count = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.query_count

    def query_batch(self, waves: np.ndarray) -> np.ndarray:
        waves = np.atleast_2d(waves)
        if self.query_count + waves.shape[0] > self.budget:
            raise BudgetExhausted(
                f"{self.query_count} queries used of {self.budget}; "
                f"batch of {waves.shape[0]} refused"
            )
        self.query_count += waves.shape[0]
        return self._predict_batch(waves)

    def query(self, wave: np.ndarray) -> np.ndarray:
        return self.query_batch(np.asarray(wave)[None, :])[0]


@dataclass(frozen=True)
class AttackConfig:
    """Shared constraint set plus per-family hyperparameters."""

    delta_max: float = 0.01
    budget: int = 10000
    mode: str = "untargeted"  # or "targeted"
    target_label: int | None = None
    similarity_min: float = 0.95  # evolutionary attack only
    seed: int = 0
    # evolutionary
    population: int = 20
    mutation_rate: float = 0.05
    mutation_scale: float = 0.2
    similarity_penalty: float = 10.0
    # zeroth-order
    beta: float = 1e-3
    latent_dim: int = 512
    estimator_draws: int = 8
    step_size: float = 0.05
    b_scale: float = 1.0

    def __post_init__(self):
        if self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if not 0.0 < self.similarity_min <= 1.0:
            raise ValueError("similarity_min must be in (0, 1]")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "targeted" and self.target_label is None:
            raise ValueError("targeted mode requires target_label")


@dataclass(frozen=True)
class AdversarialResult:
    clip: AudioClip
    queries_used: int
    success: bool
    final_loss: float
    similarity: float
    snr_db: float
    predicted: int  # -1 when the budget died before any query
    loss_trace: tuple[float, ...] = ()
    fitness_trace: tuple[float, ...] = ()


def project_linf(original: np.ndarray, candidate: np.ndarray, delta_max: float) -> np.ndarray:
    """Clamp candidate into the delta_max box around original, then into [-1, 1]."""
    low = np.maximum(original - delta_max, -1.0)
    high = np.minimum(original + delta_max, 1.0)
    return np.clip(candidate, low, high)


_LOG_FLOOR = 1e-300


def attack_loss(probs: np.ndarray, mode: str, label: int) -> float:
    """Margin loss the attack minimizes; <= 0 means the prediction flipped.

    Untargeted: log p(true) - log max_other.  Targeted: log max_other - log p(target).
    """
    return float(attack_loss_batch(np.asarray(probs)[None, :], mode, label)[0])


def attack_loss_batch(probs: np.ndarray, mode: str, label: int) -> np.ndarray:
    logp = np.log(np.maximum(probs, _LOG_FLOOR))
    others = np.delete(logp, label, axis=1).max(axis=1)
    if mode == "untargeted":
        return logp[:, label] - others
    if mode == "targeted":
        return others - logp[:, label]
    raise ValueError(f"unknown mode {mode!r}")


def _flipped(probs: np.ndarray, mode: str, true_label: int, target_label: int | None) -> np.ndarray:
    predicted = np.argmax(probs, axis=1)
    if mode == "untargeted":
        return predicted != true_label
    return predicted == target_label


def _loss_label(mode: str, true_label: int, target_label: int | None) -> int:
    return true_label if mode == "untargeted" else int(target_label)


def evolutionary_attack(oracle: QueryOracle, clip: AudioClip, label: int,
                        config: AttackConfig) -> AdversarialResult:
    """Population search over perturbations inside the delta_max box.

    Fitness is the negated attack loss minus a penalty when MFCC cosine
    similarity falls below the floor; selection is softmax over fitness with
    the elite carried unchanged, then uniform crossover and sparse uniform
    mutation.  A returned success always satisfies the similarity floor.
    """
    rng = np.random.default_rng(config.seed)
    x = clip.samples
    pop = config.population
    loss_label = _loss_label(config.mode, label, config.target_label)
    similarity = MfccSimilarity(x, clip.sample_rate)
    start_count = oracle.query_count

    def make_result(candidate, probs, loss, sim, success, traces):
        adv = clip.with_samples(candidate, id=f"{clip.id}:evo")
        return AdversarialResult(
            clip=adv,
            queries_used=oracle.query_count - start_count,
            success=success,
            final_loss=float(loss),
            similarity=float(sim),
            snr_db=measured_snr_db(x, adv.samples - x),
            predicted=int(np.argmax(probs)) if probs is not None else -1,
            loss_trace=tuple(traces[0]),
            fitness_trace=tuple(traces[1]),
        )

    # Initial population: uniform draws from the delta_max box around x.
    perturbations = rng.uniform(-config.delta_max, config.delta_max, size=(pop, x.size))
    candidates = project_linf(x, x + perturbations, config.delta_max)

    elite_cache = None  # (probs, loss, sim, fitness) of row 0 when carried over
    loss_trace: list[float] = []
    fitness_trace: list[float] = []
    while True:
        fresh = candidates if elite_cache is None else candidates[1:]
        if oracle.remaining < fresh.shape[0]:
            break
        probs_fresh = oracle.query_batch(fresh)
        losses_fresh = attack_loss_batch(probs_fresh, config.mode, loss_label)
        sims_fresh = similarity.batch(fresh)
        fitness_fresh = -losses_fresh - config.similarity_penalty * np.maximum(
            0.0, config.similarity_min - sims_fresh
        )
        if elite_cache is None:
            probs, losses, sims, fitness = probs_fresh, losses_fresh, sims_fresh, fitness_fresh
        else:
            probs = np.vstack([elite_cache[0][None, :], probs_fresh])
            losses = np.concatenate([[elite_cache[1]], losses_fresh])
            sims = np.concatenate([[elite_cache[2]], sims_fresh])
            fitness = np.concatenate([[elite_cache[3]], fitness_fresh])

        best = int(np.argmax(fitness))
        loss_trace.append(float(losses[best]))
        fitness_trace.append(float(fitness[best]))

        flipped = _flipped(probs, config.mode, label, config.target_label)
        winners = np.flatnonzero(flipped & (sims >= config.similarity_min))
        if winners.size:
            idx = int(winners[np.argmax(fitness[winners])])
            return make_result(candidates[idx], probs[idx], losses[idx], sims[idx], True,
                               (loss_trace, fitness_trace))

        elite_cache = (probs[best].copy(), float(losses[best]), float(sims[best]),
                       float(fitness[best]))
        elite_candidate = candidates[best].copy()
        perturbations = candidates - x
        weights = np.exp(fitness - fitness.max())
        weights /= weights.sum()
        parents = rng.choice(pop, size=(pop - 1, 2), p=weights)
        mask = rng.random((pop - 1, x.size), dtype=np.float32) < 0.5
        children = np.where(mask, perturbations[parents[:, 0]], perturbations[parents[:, 1]])
        mutate = rng.random((pop - 1, x.size), dtype=np.float32) < config.mutation_rate
        noise = (rng.random((pop - 1, x.size), dtype=np.float32) * 2.0 - 1.0) * (
            config.mutation_scale * config.delta_max
        )
        children = children + mutate * noise
        child_candidates = project_linf(x, x + children, config.delta_max)
        candidates = np.vstack([elite_candidate[None, :], child_candidates])

    if elite_cache is None:
        return make_result(x.copy(), None, float("inf"), 1.0, False,
                           (loss_trace, fitness_trace))
    return make_result(candidates[0], elite_cache[0], elite_cache[1], elite_cache[2], False,
                       (loss_trace, fitness_trace))


class LatentUpsampler:
    """Linear-interpolation upsampling of latent vectors to waveform length."""

    def __init__(self, latent_dim: int, length: int):
        positions = np.arange(length) * ((latent_dim - 1) / (length - 1))
        self.left = np.minimum(positions.astype(np.int64), latent_dim - 2)
        self.frac = positions - self.left

    def batch(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        return z[:, self.left] * (1.0 - self.frac) + z[:, self.left + 1] * self.frac


def latent_upsample(z: np.ndarray, length: int) -> np.ndarray:
    return LatentUpsampler(z.size, length).batch(z)[0]


def zo_gradient_estimate(func, z: np.ndarray, beta: float, draws: int,
                         rng: np.random.Generator, b_scale: float = 1.0,
                         f0: float | None = None):
    """Average finite-difference directional estimate over random unit vectors.

    estimate = mean_i b * (func(z + beta*u_i) - func(z)) / beta * u_i.
    `func` maps a [B x d] batch of latent points to a loss per row.  Returns
    (gradient estimate, f0).
    """
    d = z.size
    if f0 is None:
        f0 = float(func(z[None, :])[0])
    directions = rng.standard_normal((draws, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    values = np.asarray(func(z[None, :] + beta * directions))
    coeffs = b_scale * (values - f0) / beta
    return (coeffs[:, None] * directions).mean(axis=0), f0


def zeroth_order_attack(oracle: QueryOracle, clip: AudioClip, label: int,
                        config: AttackConfig) -> AdversarialResult:
    """Latent-space descent on finite-difference gradient estimates.

    The perturbation is delta_max * tanh(upsample(z)) for a low-dimensional
    latent z, so the l-infinity constraint holds by construction; each step
    spends one base query plus `estimator_draws` probes.
    """
    rng = np.random.default_rng(config.seed)
    x = clip.samples
    loss_label = _loss_label(config.mode, label, config.target_label)
    d = config.latent_dim
    if d > x.size:
        raise ValueError(f"latent_dim {d} exceeds clip length {x.size}")
    if config.beta <= 0:
        raise ValueError("beta must be positive")
    start_count = oracle.query_count
    upsampler = LatentUpsampler(d, x.size)
    similarity = MfccSimilarity(x, clip.sample_rate)

    def to_candidates(z_batch: np.ndarray) -> np.ndarray:
        deltas = config.delta_max * np.tanh(upsampler.batch(z_batch))
        return project_linf(x, x + deltas, config.delta_max)

    last_probs = {}

    def score(z_batch: np.ndarray) -> np.ndarray:
        probs = oracle.query_batch(to_candidates(z_batch))
        last_probs["probs"] = probs
        return attack_loss_batch(probs, config.mode, loss_label)

    def make_result(candidate, probs, loss, success, trace):
        adv = clip.with_samples(candidate, id=f"{clip.id}:zo")
        return AdversarialResult(
            clip=adv,
            queries_used=oracle.query_count - start_count,
            success=success,
            final_loss=float(loss),
            similarity=float(similarity.batch(adv.samples[None, :])[0]),
            snr_db=measured_snr_db(x, adv.samples - x),
            predicted=int(np.argmax(probs)) if probs is not None else -1,
            loss_trace=tuple(trace),
        )

    z = np.zeros(d)
    m = np.zeros(d)
    v = np.zeros(d)
    step = 0
    best = None  # (loss, candidate, probs)
    loss_trace: list[float] = []
    while oracle.remaining >= config.estimator_draws + 1:
        f0 = float(score(z[None, :])[0])
        base_probs = last_probs["probs"][0].copy()
        base_candidate = to_candidates(z[None, :])[0]
        loss_trace.append(f0)
        if best is None or f0 < best[0]:
            best = (f0, base_candidate, base_probs)
        if _flipped(base_probs[None, :], config.mode, label, config.target_label)[0]:
            return make_result(base_candidate, base_probs, f0, True, loss_trace)
        grad, _ = zo_gradient_estimate(score, z, config.beta, config.estimator_draws, rng,
                                       b_scale=config.b_scale, f0=f0)
        step += 1
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad * grad
        m_hat = m / (1.0 - 0.9**step)
        v_hat = v / (1.0 - 0.999**step)
        z = z - config.step_size * m_hat / (np.sqrt(v_hat) + 1e-8)

    if best is None:
        return make_result(x.copy(), None, float("inf"), False, loss_trace)
    return make_result(best[1], best[2], best[0], False, loss_trace)


def gaussian_baseline(clip: AudioClip, snr_db: float, seed: int) -> AudioClip:
    """Additive white Gaussian noise at the requested SNR, clamped to [-1, 1]."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(seed)
    noise = scale_noise_to_snr(clip, rng.standard_normal(len(clip)), snr_db)
    return clip.with_samples(np.clip(clip.samples + noise, -1.0, 1.0), id=f"{clip.id}:gauss")
