"""Detection metrics over anomaly-oriented score sets (higher = more anomalous)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    clean_scores: np.ndarray
    adversarial_scores: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean_scores = np.asarray(self.clean_scores, dtype=np.float64).ravel()
        self.adversarial_scores = np.asarray(self.adversarial_scores, dtype=np.float64).ravel()

    def validate(self):
        if self.clean_scores.size == 0 or self.adversarial_scores.size == 0:
            raise MetricError("score set needs non-empty clean and adversarial sides")
        if not (np.isfinite(self.clean_scores).all() and np.isfinite(self.adversarial_scores).all()):
            raise MetricError("scores must be finite")

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.adversarial_scores, self.clean_scores, dict(self.provenance))


def auroc(s: ScoreSet) -> float:
    """P(adversarial > clean) + 0.5 P(tie), by rank counting."""
    s.validate()
    clean = np.sort(s.clean_scores)
    adv = s.adversarial_scores
    below = np.searchsorted(clean, adv, side="left")
    not_above = np.searchsorted(clean, adv, side="right")
    # integer counts keep the result exact for the pairwise definition
    wins2 = int(2 * below.sum() + (not_above - below).sum())
    return wins2 / (2 * clean.size * adv.size)


def threshold_at_tnr(clean_scores, tnr: float = 0.9) -> float:
    """Smallest candidate tau with at least ``tnr`` of the clean scores strictly below it.

    Candidates are the clean scores and the next float above the largest one;
    clean samples are accepted when score < tau.
    """
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if clean.size == 0:
        raise MetricError("empty clean scores")
    n = clean.size
    need = int(np.ceil(tnr * n))
    # settle float rounding: need is the least count with count / n >= tnr
    while need > 0 and (need - 1) / n >= tnr:
        need -= 1
    while need <= n and need / n < tnr:
        need += 1
    if need <= 0:
        return float("-inf")
    above = clean[need:][clean[need:] > clean[need - 1]]
    if above.size:
        return float(above[0])
    return float(np.nextafter(clean[-1], np.inf))


def tpr_at_tnr(s: ScoreSet, tnr: float = 0.9) -> float:
    s.validate()
    tau = threshold_at_tnr(s.clean_scores, tnr)
    return float(np.mean(s.adversarial_scores >= tau))
