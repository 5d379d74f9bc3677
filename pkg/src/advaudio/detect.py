"""Adversarial detection and filtering.

The main detector scores each input by how far its Monte-Carlo dispersion
statistic (hidden-layer std under Flipout sampling) sits from a reference
distribution of clean-clip statistics, measured with the 1-Wasserstein
distance.  Baselines: a temporal-consistency (segment posterior) score and
the two preprocessing defenses.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioClip, downsample_defense_batch
from .bayes import BnnClassifier, _mc_from_pooled, mc_predict

QUANTILE_POINTS = 256
STATISTICS = ("hidden_std", "output_entropy", "hidden_sliced")

REFERENCE_MAGIC = b"ADVAUREF"


def wasserstein_1d(a, b, quantile_points: int = QUANTILE_POINTS) -> float:
    """1-Wasserstein distance between empirical distributions of reals.

    Equal-size inputs no larger than the quantile grid use the exact
    sorted-sample formula; otherwise both are resampled onto midpoint
    quantiles and the absolute quantile gap is averaged.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size == b.size and a.size <= quantile_points:
        return float(np.mean(np.abs(a - b)))
    u = (np.arange(quantile_points) + 0.5) / quantile_points
    qa = a[np.minimum((u * a.size).astype(np.int64), a.size - 1)]
    qb = b[np.minimum((u * b.size).astype(np.int64), b.size - 1)]
    return float(np.mean(np.abs(qa - qb)))


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, projections: int, seed: int,
                       translation_invariant: bool = False) -> float:
    """Mean 1-D Wasserstein distance over random unit projections.

    With translation_invariant=True each sample set is centered on its mean
    before projecting, so a constant offset between the sets scores zero.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if translation_invariant:
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return float(np.mean([wasserstein_1d(a @ u, b @ u) for u in directions]))


# ---------------------------------------------------------------------------
# BNN dispersion statistic


@dataclass
class StatisticResult:
    value: float | None  # scalar statistic; None for the sliced mode
    hidden: np.ndarray  # [T x H] pre-activation samples
    mean_probs: np.ndarray


def _scalar_statistic(statistic: str, hidden: np.ndarray, mean_probs: np.ndarray) -> float | None:
    if statistic == "hidden_std":
        if np.all(hidden == hidden[0]):
            return 0.0  # degenerate (sigma = 0) model: exactly no dispersion
        return float(np.mean(np.std(hidden, axis=0)))
    if statistic == "output_entropy":
        p = np.maximum(mean_probs, 1e-300)
        return float(-np.sum(p * np.log(p)))
    if statistic == "hidden_sliced":
        return None
    raise ValueError(f"unknown statistic {statistic!r}")


def bnn_statistic(model: BnnClassifier, clip: AudioClip | np.ndarray, T: int, seed: int,
                  statistic: str = "hidden_std") -> StatisticResult:
    """Dispersion statistic of T Flipout passes on one clip.

    hidden_std: mean over hidden units of the per-unit std across passes
    (zero for a model with no weight noise).
    """
    mean_probs, hidden = mc_predict(model, clip, T, seed)
    return StatisticResult(_scalar_statistic(statistic, hidden, mean_probs), hidden, mean_probs)


def clip_seed(base_seed: int, clip_id: str) -> int:
    """Stable per-clip MC seed derived from the calibration seed and clip id."""
    return int(np.random.SeedSequence(base_seed, spawn_key=(zlib.crc32(clip_id.encode()),))
               .generate_state(1)[0])


@dataclass
class DetectorConfig:
    statistic: str = "hidden_std"
    T: int = 32
    seed: int = 0
    projections: int = 64  # sliced mode
    translation_invariant: bool = True  # sliced mode
    sliced_pool_cap: int = 2048
    td_segments: int = 4
    ls_window: int = 3

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")
        if self.T < 2:
            raise ValueError("T must be >= 2")


@dataclass
class CalibrationReference:
    """Clean-data reference the detector measures dispersion against."""

    statistic: str
    samples: np.ndarray  # sorted per-clip scalar statistics (scalar modes)
    threshold: float
    T: int
    seed: int
    hidden_pool: np.ndarray | None = None  # pooled [N x H] samples (sliced mode)

    def save(self, path):
        samples = np.sort(np.asarray(self.samples, dtype="<f8"))
        pool = self.hidden_pool
        with open(path, "wb") as fh:
            fh.write(REFERENCE_MAGIC)
            stat = self.statistic.encode()
            fh.write(struct.pack("<I", len(stat)))
            fh.write(stat)
            fh.write(struct.pack("<dqq", self.threshold, self.T, self.seed))
            fh.write(struct.pack("<q", samples.size))
            fh.write(samples.tobytes())
            if pool is None:
                fh.write(struct.pack("<qq", 0, 0))
            else:
                fh.write(struct.pack("<qq", pool.shape[0], pool.shape[1]))
                fh.write(np.asarray(pool, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CalibrationReference":
        with open(path, "rb") as fh:
            if fh.read(8) != REFERENCE_MAGIC:
                raise ValueError("bad reference magic")
            (stat_len,) = struct.unpack("<I", fh.read(4))
            statistic = fh.read(stat_len).decode()
            threshold, t_count, seed = struct.unpack("<dqq", fh.read(24))
            (n,) = struct.unpack("<q", fh.read(8))
            samples = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            rows, cols = struct.unpack("<qq", fh.read(16))
            pool = None
            if rows:
                pool = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        return cls(statistic=statistic, samples=samples, threshold=threshold,
                   T=t_count, seed=seed, hidden_pool=pool)


@dataclass
class DetectionScore:
    clip_id: str
    statistic_value: float | None
    distance: float
    decision: str  # "clean" | "adversarial"

    @property
    def is_adversarial(self) -> bool:
        return self.decision == "adversarial"


def youden_threshold(neg_scores: np.ndarray, pos_scores: np.ndarray) -> float:
    """Threshold maximizing TPR - FPR for the rule `score > threshold`."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    if neg_scores.size == 0 or pos_scores.size == 0:
        raise ValueError("both score pools must be nonempty")
    values = np.unique(np.concatenate([neg_scores, pos_scores]))
    midpoints = (values[:-1] + values[1:]) / 2.0
    candidates = np.concatenate([[values[0] - 1.0], midpoints])
    best_threshold, best_j = candidates[0], -np.inf
    for threshold in candidates:
        tpr = np.mean(pos_scores > threshold)
        fpr = np.mean(neg_scores > threshold)
        if tpr - fpr > best_j + 1e-15:
            best_j = tpr - fpr
            best_threshold = threshold
    return float(best_threshold)


class BnnDetector:
    """Wasserstein dispersion detector around a stochastic classifier."""

    def __init__(self, model: BnnClassifier, config: DetectorConfig):
        self.model = model
        self.config = config

    def _statistics(self, waves: np.ndarray, ids: list[str], seed: int) -> list[StatisticResult]:
        seeds = [clip_seed(seed, cid) for cid in ids]
        pooled = self.model.pooled_from_features(self.model.features(waves))
        out = []
        for i in range(waves.shape[0]):
            mean_probs, hidden = _mc_from_pooled(self.model, pooled[i : i + 1],
                                                 self.config.T, seeds[i])
            out.append(StatisticResult(
                _scalar_statistic(self.config.statistic, hidden, mean_probs),
                hidden, mean_probs))
        return out

    def build_reference(self, clean_waves: np.ndarray, clean_ids: list[str]) -> CalibrationReference:
        stats = self._statistics(clean_waves, clean_ids, self.config.seed)
        if self.config.statistic == "hidden_sliced":
            pool = np.concatenate([s.hidden for s in stats], axis=0)
            if pool.shape[0] > self.config.sliced_pool_cap:
                rng = np.random.default_rng(self.config.seed)
                pool = pool[rng.choice(pool.shape[0], self.config.sliced_pool_cap, replace=False)]
            samples = np.zeros(len(stats))
        else:
            pool = None
            samples = np.array([s.value for s in stats])
        return CalibrationReference(
            statistic=self.config.statistic,
            samples=np.sort(samples),
            threshold=np.inf,
            T=self.config.T,
            seed=self.config.seed,
            hidden_pool=pool,
        )

    def distance(self, reference: CalibrationReference, stat: StatisticResult) -> float:
        if self.config.statistic == "hidden_sliced":
            return sliced_wasserstein(stat.hidden, reference.hidden_pool,
                                      self.config.projections, reference.seed,
                                      self.config.translation_invariant)
        return wasserstein_1d(np.array([stat.value]), reference.samples)

    def score_batch(self, reference: CalibrationReference, waves: np.ndarray,
                    ids: list[str]) -> np.ndarray:
        stats = self._statistics(waves, ids, reference.seed)
        return np.array([self.distance(reference, s) for s in stats])

    def detect(self, reference: CalibrationReference, clip: AudioClip) -> DetectionScore:
        stat = bnn_statistic(self.model, clip, reference.T,
                             clip_seed(reference.seed, clip.id), self.config.statistic)
        distance = self.distance(reference, stat)
        decision = "adversarial" if distance > reference.threshold else "clean"
        return DetectionScore(clip.id, stat.value, distance, decision)


def calibrate(model: BnnClassifier, clean_reference: tuple[np.ndarray, list[str]],
              calibration_clean: tuple[np.ndarray, list[str]],
              calibration_adv: tuple[np.ndarray, list[str]],
              config: DetectorConfig) -> CalibrationReference:
    """Build the clean reference and pick the Youden-J threshold.

    The reference distribution comes from clean training-split clips only;
    the threshold is fit on a labeled pool of clean dev clips (negatives)
    and attack dev clips (positives).
    """
    if len(clean_reference[1]) == 0:
        raise ValueError("empty calibration split")
    detector = BnnDetector(model, config)
    reference = detector.build_reference(*clean_reference)
    neg = detector.score_batch(reference, *calibration_clean)
    pos = detector.score_batch(reference, *calibration_adv)
    reference.threshold = youden_threshold(neg, pos)
    return reference


def detect(model: BnnClassifier, reference: CalibrationReference, clip: AudioClip,
           config: DetectorConfig | None = None) -> DetectionScore:
    cfg = config or DetectorConfig(statistic=reference.statistic, T=reference.T,
                                   seed=reference.seed)
    return BnnDetector(model, cfg).detect(reference, clip)


# ---------------------------------------------------------------------------
# Temporal-consistency baseline


def td_scores_batch(model, waves: np.ndarray, k: int) -> np.ndarray:
    """Segment-consistency score per clip (vectorized over the pool)."""
    if k < 2:
        raise ValueError("segment count must be >= 2")
    n = waves.shape[1]
    seg_len = -(-n // k)
    padded = np.zeros((waves.shape[0], seg_len * k))
    padded[:, :n] = waves
    full_probs = model.forward_batch(waves)
    score = np.zeros(waves.shape[0])
    for j in range(k):
        segment_clips = np.zeros_like(waves)
        segment = padded[:, j * seg_len : (j + 1) * seg_len]
        segment_clips[:, : segment.shape[1]] = segment
        seg_probs = model.forward_batch(segment_clips)
        score += 0.5 * np.sum(np.abs(seg_probs - full_probs), axis=1)
    return score / k


def td_detector(model, clip: AudioClip, k: int = 4) -> float:
    """Mean total-variation gap between segment posteriors and the full posterior."""
    return float(td_scores_batch(model, clip.samples[None, :], k)[0])


# ---------------------------------------------------------------------------
# Preprocessing defenses as model wrappers

DEFENSES = ("none", "ls", "ds")


def _local_smooth_batch(waves: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return waves
    half = window // 2
    n = waves.shape[1]
    out = np.empty_like(waves)
    out[:, half : n - half] = np.median(sliding_window_view(waves, window, axis=1), axis=-1)
    for i in range(half):
        out[:, i] = np.median(waves[:, : i + half + 1], axis=1)
        out[:, n - 1 - i] = np.median(waves[:, n - 1 - i - half :], axis=1)
    return out


class DefendedModel:
    """Model wrapper applying a preprocessing defense before every forward."""

    def __init__(self, model, defense: str = "none", ls_window: int = 3):
        if defense not in DEFENSES:
            raise ValueError(f"unknown defense {defense!r}")
        if defense == "ls" and (ls_window < 1 or ls_window % 2 == 0):
            raise ValueError(f"ls window must be odd and >= 1, got {ls_window}")
        self.model = model
        self.defense = defense
        self.ls_window = ls_window
        self.spec = model.spec

    def preprocess(self, waves: np.ndarray) -> np.ndarray:
        if self.defense == "ls":
            return _local_smooth_batch(waves, self.ls_window)
        if self.defense == "ds":
            return downsample_defense_batch(waves, self.spec.sample_rate)
        return waves

    def forward_batch(self, waves: np.ndarray) -> np.ndarray:
        return self.model.forward_batch(self.preprocess(np.atleast_2d(waves)))

    def forward(self, clip: AudioClip) -> np.ndarray:
        return self.forward_batch(clip.samples[None, :])[0]


def defense_wrap(model, defense: str = "none", ls_window: int = 3) -> DefendedModel:
    """Wrap a model so oracle queries go through the preprocessing defense."""
    return DefendedModel(model, defense, ls_window)
