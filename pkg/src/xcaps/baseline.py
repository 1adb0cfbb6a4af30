"""Per-pixel multinomial logistic regression: the linear comparator for X-Caps.

Trained on the same soft (Gaussian) malignancy targets with cross-entropy and
an L2 penalty; the penalty strength is picked on the validation split by +/-1
accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data import dataset_arrays
from .ratings import within_one_correct

L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class LogisticBaseline:
    weights: np.ndarray   # [features + 1, K]
    mean: np.ndarray
    std: np.ndarray
    l2: float

    def _design(self, images: np.ndarray) -> np.ndarray:
        x = (images.reshape(len(images), -1) - self.mean) / self.std
        return np.hstack([x, np.ones((len(x), 1))])

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        z = self._design(np.asarray(images, dtype=np.float64)) @ self.weights
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1) + 1


def _fit(x: np.ndarray, targets: np.ndarray, l2: float, maxiter: int) -> np.ndarray:
    n, f = x.shape
    k = targets.shape[1]

    def objective(w_flat):
        w = w_flat.reshape(f, k)
        z = x @ w
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(targets * logp).sum() / n + 0.5 * l2 * (w[:-1] ** 2).sum()
        grad = x.T @ (np.exp(logp) - targets) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros(f * k), jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    return res.x.reshape(f, k)


def within_one_accuracy(pred_classes, records) -> float:
    return float(np.mean([within_one_correct(int(p), r.malignancy_mean) for p, r in zip(pred_classes, records)]))


def fit_logistic_baseline(train, val, l2_grid=L2_GRID, maxiter: int = 500) -> LogisticBaseline:
    tr = dataset_arrays(train, np.float64)
    images = tr["images"].reshape(len(train), -1)
    mean = images.mean(axis=0)
    std = images.std(axis=0) + 1e-8
    best = None
    for l2 in l2_grid:
        model = LogisticBaseline(np.zeros(0), mean, std, l2)
        model.weights = _fit(model._design(tr["images"]), tr["mal_targets"], l2, maxiter)
        va_images = dataset_arrays(val, np.float64)["images"]
        acc = within_one_accuracy(model.predict(va_images), val)
        if best is None or acc > best[0]:
            best = (acc, model)
    return best[1]
