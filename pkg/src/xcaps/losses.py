"""Supervised objectives: masked reconstruction, attribute L1, malignancy KL.

All losses accept a single sample or a batch (leading axis) and return the
batch mean as a scalar tensor, so a single-sample call yields the per-sample
value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ndtensor import Tensor, absolute, log_softmax, mean, mul, scale, softmax, sub, tsum

PROB_FLOOR = 1e-7
DEFAULT_GAMMA = 0.512


@dataclass
class LossWeights:
    alpha: list[float] = field(default_factory=lambda: [1.0] * 6)
    beta: float = 1.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if any(a < 0 for a in self.alpha) or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_r: float
    l_a: float
    l_m: float
    total: float
    l_a_per_attribute: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"l_r": self.l_r, "l_a": self.l_a, "l_m": self.l_m, "total": self.total,
                "l_a_per_attribute": list(self.l_a_per_attribute)}


def _batch_mean(per_sample: Tensor) -> Tensor:
    return per_sample if per_sample.data.ndim == 0 else mean(per_sample)


def reconstruction_loss(recon: Tensor, image, mask, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """(gamma / (H*W)) * sum |image*mask - recon| over pixels."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if recon.shape != image.shape or image.shape != mask.shape:
        raise ValueError(f"shape mismatch: recon {recon.shape}, image {image.shape}, mask {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0 or 1)")
    target = Tensor((image * mask).astype(recon.dtype))
    h, w = image.shape[-2:]
    per_pixel = absolute(sub(target, recon))
    per_sample = tsum(per_pixel, axis=(-2, -1))
    return scale(_batch_mean(per_sample), gamma / (h * w))


def attribute_loss(pred: Tensor, target, alpha) -> Tensor:
    """sum_n alpha_n * |target_n - pred_n| (normalised [0, 1] units)."""
    target = np.asarray(target)
    alpha = np.asarray(alpha, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != alpha.shape[0]:
        raise ValueError(f"length mismatch: pred {pred.shape}, target {target.shape}, alpha {alpha.shape}")
    weights = Tensor(np.broadcast_to(alpha, pred.shape).copy())
    per_attr = mul(weights, absolute(sub(Tensor(target.astype(pred.dtype)), pred)))
    return _batch_mean(tsum(per_attr, axis=-1))


def attribute_loss_terms(pred: np.ndarray, target: np.ndarray, alpha) -> np.ndarray:
    """Batch-mean weighted error per attribute (for reporting)."""
    err = np.asarray(alpha) * np.abs(np.asarray(target) - np.asarray(pred))
    return err.reshape(-1, err.shape[-1]).mean(axis=0)


def fit_target_distribution(mu: float, sigma: float, classes: int = 5) -> np.ndarray:
    """Gaussian pdf at class centres 1..K, floored and renormalised."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    k = np.arange(1, classes + 1, dtype=np.float64)
    g = np.exp(-(k - mu) ** 2 / (2.0 * sigma ** 2)) / math.sqrt(2.0 * math.pi * sigma ** 2)
    g = np.maximum(g, PROB_FLOOR)
    return g / g.sum()


def malignancy_kl_loss(logits: Tensor, target, beta: float = 1.0) -> Tensor:
    """beta * KL(softmax(logits) || target), in the order prediction-over-target."""
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, target {target.shape}")
    if np.any(target <= 0) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError("target must be a strictly positive probability vector")
    p = softmax(logits, axis=-1)
    logp = log_softmax(logits, axis=-1)
    log_g = Tensor(np.log(target).astype(logits.dtype))
    per_sample = tsum(mul(p, sub(logp, log_g)), axis=-1)
    return scale(_batch_mean(per_sample), beta)


def expected_score(logits: Tensor, classes: int = 5) -> Tensor:
    """Softmax-weighted class score mapped onto [0, 1]; used by the mean-regression ablation."""
    p = softmax(logits, axis=-1)
    centres = (np.arange(classes, dtype=np.float64) / (classes - 1)).astype(logits.dtype)
    weights = Tensor(np.broadcast_to(centres, logits.shape).copy())
    return tsum(mul(p, weights), axis=-1)


def malignancy_regression_loss(logits: Tensor, target_mean, beta: float = 1.0) -> Tensor:
    """beta * |(mean - 1)/4 - expected normalised score|."""
    classes = logits.shape[-1]
    target = (np.asarray(target_mean, dtype=np.float64) - 1.0) / (classes - 1)
    pred = expected_score(logits, classes)
    err = absolute(sub(Tensor(np.asarray(target, dtype=logits.dtype).reshape(pred.shape)), pred))
    return scale(_batch_mean(err), beta)


def total_loss(l_m, l_a, l_r, l_a_per_attribute=()) -> LossBreakdown:
    vals = [float(v.item() if isinstance(v, Tensor) else v) for v in (l_m, l_a, l_r)]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss component {vals}")
    l_m, l_a, l_r = vals
    return LossBreakdown(l_r=l_r, l_a=l_a, l_m=l_m, total=l_m + l_a + l_r,
                         l_a_per_attribute=[float(x) for x in l_a_per_attribute])
