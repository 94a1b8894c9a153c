"""Evaluation metrics: influence MSE, held-out Poisson log-likelihood, AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .data import CountMatrix
from .vi import RATE_FLOOR, poisson_loglik


class MetricError(ValueError):
    """Metric undefined for the given input."""


def influence_mse(est, truth) -> float:
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise MetricError(f"length mismatch: {est.shape} vs {truth.shape}")
    if est.size == 0:
        raise MetricError("no persons to score")
    return float(np.mean((est - truth) ** 2))


def heldout_loglik(rates, counts, floor: float = RATE_FLOOR) -> float:
    """Mean Poisson log-likelihood of held-out counts at the given rates.

    ``rates`` is an array aligned with ``counts`` or a callable returning one.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if callable(rates):
        rates = rates()
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != counts.shape:
        raise MetricError(f"rates {rates.shape} and counts {counts.shape} disagree")
    if counts.size == 0:
        raise MetricError("no held-out entries")
    return float(np.mean(poisson_loglik(counts, rates, floor)))


class BaselineRates:
    """Rate 1/m_i, with m_i the number of distinct items in row i of x."""

    def __init__(self, x: CountMatrix, eps: float = RATE_FLOOR):
        m = x.row_nnz().astype(np.float64)
        self.per_row = np.where(m > 0, 1.0 / np.maximum(m, 1.0), eps)

    def __call__(self, rows, cols=None):
        return self.per_row[np.asarray(rows, dtype=np.int64)]


def baseline_rates(x: CountMatrix, eps: float = RATE_FLOOR) -> BaselineRates:
    return BaselineRates(x, eps)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
