"""Ranking metrics for confidence scores."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auroc(scores, positives) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_ranking_accuracy(preferred, other) -> float:
    """Share of pairs where ``preferred`` scores higher; exact ties count half."""
    preferred = np.asarray(preferred, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    return float(np.mean((preferred > other) + 0.5 * (preferred == other)))
