"""Clustering metrics: Hungarian-matched accuracy, NMI and ARI."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _check(true, pred) -> tuple[np.ndarray, np.ndarray]:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"label arrays differ in length: {true.size} vs {pred.size}")
    if true.size == 0:
        raise ValueError("empty labelings")
    if true.min() < 0 or pred.min() < 0:
        raise ValueError("labels must be non-negative integers")
    return true, pred


def contingency(true, pred) -> np.ndarray:
    """Counts of (true class, predicted cluster) pairs, over the labels that occur."""
    true, pred = _check(true, pred)
    _, t = np.unique(true, return_inverse=True)
    _, p = np.unique(pred, return_inverse=True)
    table = np.zeros((t.max() + 1, p.max() + 1), dtype=np.int64)
    np.add.at(table, (t, p), 1)
    return table


def accuracy(true, pred) -> float:
    """Best matched fraction over one-to-one cluster-to-class assignments."""
    table = contingency(true, pred)
    size = max(table.shape)
    square = np.zeros((size, size), dtype=np.int64)
    square[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(-square)
    return int(square[rows, cols].sum()) / int(table.sum())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(true, pred) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    table = contingency(true, pred).astype(np.float64)
    n = table.sum()
    h_true = _entropy(table.sum(axis=1))
    h_pred = _entropy(table.sum(axis=0))
    if h_true == 0.0 and h_pred == 0.0:
        return 1.0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    nz = table > 0
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return max(0.0, mi / ((h_true + h_pred) / 2.0))


def ari(true, pred) -> float:
    true, pred = _check(true, pred)
    if true.size < 2:
        raise ValueError("ARI needs at least two samples")
    table = contingency(true, pred)

    def pairs(counts):
        return sum(int(c) * (int(c) - 1) // 2 for c in np.ravel(counts))

    # exact integer arithmetic with one final division
    cells, rows, cols = pairs(table), pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = true.size * (true.size - 1) // 2
    num = 2 * (total * cells - rows * cols)
    den = total * (rows + cols) - 2 * rows * cols
    if den == 0:
        return 1.0
    return num / den


def evaluate(true, pred) -> dict[str, float]:
    return {"acc": accuracy(true, pred), "nmi": nmi(true, pred), "ari": ari(true, pred)}
