"""Multi-rater scores: label distributions, confidence and the +/-1 rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import PROB_FLOOR, fit_target_distribution

ATTRIBUTE_NAMES = ("sub", "sph", "mar", "lob", "spi", "tex")
SIGMA_MIN = 0.1
MIN_RATERS = 3
SCORE_RANGE = (1, 5)


@dataclass(frozen=True)
class RaterScores:
    malignancy: tuple[int, ...]
    attributes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        _check_scores(self.malignancy, "malignancy")
        if set(self.attributes) != set(ATTRIBUTE_NAMES):
            raise ValueError(f"attributes must be exactly {ATTRIBUTE_NAMES}, got {sorted(self.attributes)}")
        for name in ATTRIBUTE_NAMES:
            _check_scores(self.attributes[name], name)

    @classmethod
    def from_lists(cls, malignancy, attributes) -> "RaterScores":
        return cls(tuple(int(s) for s in malignancy),
                   {k: tuple(int(s) for s in v) for k, v in attributes.items()})

    def malignancy_mean(self) -> float:
        return mean_score(self.malignancy)

    def attribute_means(self) -> np.ndarray:
        return np.array([mean_score(self.attributes[k]) for k in ATTRIBUTE_NAMES])

    def to_json(self) -> dict:
        return {"malignancy": list(self.malignancy),
                "attributes": {k: list(self.attributes[k]) for k in ATTRIBUTE_NAMES}}


@dataclass(frozen=True)
class ScoreDistribution:
    mu: float
    sigma: float
    probs: np.ndarray


def _check_scores(scores, label: str) -> None:
    if len(scores) < MIN_RATERS:
        raise ValueError(f"{label}: need at least {MIN_RATERS} rater scores, got {len(scores)}")
    lo, hi = SCORE_RANGE
    for s in scores:
        if int(s) != s or not lo <= s <= hi:
            raise ValueError(f"{label}: score {s!r} outside {lo}..{hi}")


def mean_score(scores) -> float:
    if len(scores) == 0:
        raise ValueError("mean of an empty score list")
    return math.fsum(scores) / len(scores)


def fit_label_distribution(scores, classes: int = 5) -> ScoreDistribution:
    _check_scores(scores, "scores")
    mu = mean_score(scores)
    var = math.fsum((s - mu) ** 2 for s in scores) / len(scores)
    sigma = max(math.sqrt(var), SIGMA_MIN)
    return ScoreDistribution(mu, sigma, fit_target_distribution(mu, sigma, classes))


def within_one_correct(predicted_class: int, rater_mean: float) -> bool:
    if not SCORE_RANGE[0] <= predicted_class <= SCORE_RANGE[1]:
        raise ValueError(f"predicted class {predicted_class} outside 1..5")
    return abs(predicted_class - rater_mean) <= 1.0


def confidence(probs) -> float:
    """1 - H(p)/log K; floors zero entries at the target floor before the entropy."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("confidence needs a normalised probability vector")
    p = np.maximum(p, PROB_FLOOR)
    p = p / p.sum()
    h = -float(np.sum(p * np.log(p)))
    return min(1.0, max(0.0, 1.0 - h / math.log(len(p))))
