"""Ranking metrics, bootstrap confidence intervals, and linear CKA."""

from __future__ import annotations

import numpy as np

from .seeding import derive_rng


def _average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(labels, scores):
    """Rank-statistic AUROC; tied scores earn half credit."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: needs both classes")
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(labels, scores):
    """Average precision by step integration of the precision-recall curve.

    Thresholds descend through the unique scores; tied scores enter
    together.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUPRC undefined: no positives")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    cuts = np.concatenate([boundaries, [len(scores)]])
    tp = np.cumsum(sorted_labels)[cuts - 1]
    precision = tp / cuts
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def bootstrap_ci(labels, scores, metric, n_resamples=100, seed=0, percentiles=(2.5, 97.5)):
    """Percentile CI from resampling trajectories with replacement.

    Degenerate resamples (a metric that raises, e.g. one-class AUROC) are
    dropped from the percentile pool.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    rng = derive_rng(seed, "bootstrap")
    n = len(labels)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric(labels[idx], scores[idx]))
        except ValueError:
            continue
    if not values:
        raise ValueError("every bootstrap resample was degenerate")
    lo, hi = np.percentile(values, percentiles)
    return float(lo), float(hi)


def cka(x, y):
    """Linear centered kernel alignment between (n, p) and (n, q) activations.

    Invariant to orthogonal transforms and isotropic scaling of either input.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ValueError(f"CKA needs matching n >= 2, got {x.shape} and {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    norm_x = np.linalg.norm(xc.T @ xc, "fro")
    norm_y = np.linalg.norm(yc.T @ yc, "fro")
    if norm_x == 0.0 or norm_y == 0.0:
        raise ValueError("CKA undefined for zero-variance activations")
    return float(cross / (norm_x * norm_y))
