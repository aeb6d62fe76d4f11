"""Task metrics: accuracy, Matthews correlation, Pearson correlation.

Matthews and Pearson return 0.0 when their denominator vanishes (e.g. a
constant prediction vector).
"""

from __future__ import annotations

import numpy as np


def _pair(predictions, gold, min_len: int = 1):
    p = np.asarray(predictions)
    g = np.asarray(gold)
    if p.shape != g.shape or p.ndim != 1:
        raise ValueError(f"predictions and gold must be equal-length vectors, got {p.shape} vs {g.shape}")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} items")
    return p, g


def accuracy(predictions, gold) -> float:
    p, g = _pair(predictions, gold)
    return float(np.mean(p == g))


def matthews_corr(predictions, gold) -> float:
    """Multiclass Matthews correlation (Gorodkin's R_K) from the confusion matrix."""
    p, g = _pair(predictions, gold, 2)
    labels = np.union1d(p, g)
    index = {v: i for i, v in enumerate(labels.tolist())}
    k = len(labels)
    cm = np.zeros((k, k), dtype=np.float64)
    for a, b in zip(g.tolist(), p.tolist()):
        cm[index[a], index[b]] += 1
    t = cm.sum(axis=1)  # true occurrences
    q = cm.sum(axis=0)  # predicted occurrences
    c = np.trace(cm)
    s = cm.sum()
    num = c * s - t @ q
    den = np.sqrt(s * s - q @ q) * np.sqrt(s * s - t @ t)
    if den == 0:
        return 0.0
    return float(np.clip(num / den, -1.0, 1.0))


def pearson_corr(predictions, gold) -> float:
    p, g = _pair(predictions, gold, 2)
    p = p.astype(np.float64) - p.mean()
    g = g.astype(np.float64) - g.mean()
    den = np.sqrt((p * p).sum() * (g * g).sum())
    if den == 0:
        return 0.0
    return float(np.clip((p * g).sum() / den, -1.0, 1.0))


METRICS = {
    "accuracy": accuracy,
    "matthews": matthews_corr,
    "pearson": pearson_corr,
}


def compute(metric: str, predictions, gold) -> float:
    try:
        fn = METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None
    return fn(predictions, gold)
