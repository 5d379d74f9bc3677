"""Evaluation metrics: rank AUC, confusion rates, targeted unsuccessful rate."""

from __future__ import annotations

import numpy as np


def auc(scores_pos, scores_neg) -> float:
    """Rank-based AUC: fraction of (pos, neg) pairs with pos > neg, ties at 1/2."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.sort(np.asarray(scores_neg, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))


def confusion_rates(decisions, ground_truth) -> tuple[float | None, float | None]:
    """(FP%, FN%) of adversarial-flag decisions against ground truth.

    FP: clean inputs flagged adversarial over all clean; FN: adversarial
    inputs passed over all adversarial.  A rate whose class is absent from
    the ground truth is reported as None.
    """
    decisions = np.asarray(decisions, dtype=bool)
    truth = np.asarray(ground_truth, dtype=bool)
    if decisions.shape != truth.shape:
        raise ValueError("decisions and ground truth must have equal length")
    n_clean = int(np.sum(~truth))
    n_adv = int(np.sum(truth))
    fp = float(100.0 * np.sum(decisions & ~truth) / n_clean) if n_clean else None
    fn = float(100.0 * np.sum(~decisions & truth) / n_adv) if n_adv else None
    return fp, fn


def unsuccessful_rate(successes) -> float:
    """Percentage of targeted attempts that failed to manipulate the model."""
    successes = list(successes)
    if not successes:
        raise ValueError("no attack results")
    return float(100.0 * (1.0 - np.mean(np.asarray(successes, dtype=bool))))


def unsuccessful_rate_with_detection(successes, detected) -> float:
    """UR under a detector defense: success requires fooling AND evading.

    A flagged-and-filtered input counts as a failed manipulation.
    """
    successes = np.asarray(list(successes), dtype=bool)
    detected = np.asarray(list(detected), dtype=bool)
    if successes.size == 0:
        raise ValueError("no attack results")
    if successes.shape != detected.shape:
        raise ValueError("successes and detected must have equal length")
    return float(100.0 * (1.0 - np.mean(successes & ~detected)))


def error_rate(predictions, labels) -> float:
    """Classification error in percent."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    return float(100.0 * np.mean(predictions != labels))
