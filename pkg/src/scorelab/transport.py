"""Exact Wasserstein-2 between equal-size samples, plus correlation stats.

Equal-weight empirical measures of the same size reduce the W2 problem to a
min-cost perfect matching under squared Euclidean costs, solved exactly with
a shortest-augmenting-path assignment solver.  A factorial brute force is
kept as an independent oracle for small instances.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import pearsonr, spearmanr

from .errors import UndefinedCorrelation

DEFAULT_SIZE_CAP = 4096
_BRUTE_FORCE_CAP = 8


def _check_clouds(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("sample clouds must be (m, d) matrices")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("sample clouds must be finite")
    if X.shape != Y.shape:
        raise ValueError(f"clouds must have equal shape, got {X.shape} vs {Y.shape}")
    return X, Y


def _cost_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)


def w2_exact(X: np.ndarray, Y: np.ndarray, size_cap: int = DEFAULT_SIZE_CAP) -> float:
    """W2 distance between the empirical measures of two same-size clouds."""
    X, Y = _check_clouds(X, Y)
    m = X.shape[0]
    if m > size_cap:
        raise ValueError(f"cloud size {m} exceeds the configured cap {size_cap}")
    rows, cols = linear_sum_assignment(_cost_matrix(X, Y))
    total = float(((X[rows] - Y[cols]) ** 2).sum())
    return math.sqrt(total / m)


def w2_bruteforce(X: np.ndarray, Y: np.ndarray) -> float:
    """Exhaustive minimum over all matchings; oracle for tiny instances."""
    X, Y = _check_clouds(X, Y)
    m = X.shape[0]
    if m > _BRUTE_FORCE_CAP:
        raise ValueError(f"brute force limited to m <= {_BRUTE_FORCE_CAP}, got {m}")
    cost = _cost_matrix(X, Y)
    best = min(sum(cost[i, p[i]] for i in range(m)) for p in itertools.permutations(range(m)))
    return math.sqrt(best / m)


def w2_report(X: np.ndarray, Y: np.ndarray, size_cap: int = DEFAULT_SIZE_CAP) -> dict:
    w2 = w2_exact(X, Y, size_cap=size_cap)
    return {
        "m": int(np.asarray(X).shape[0]),
        "d": int(np.asarray(X).shape[1]),
        "w2": w2,
        "w2_sq": w2 * w2,
        "solver_iterations": int(np.asarray(X).shape[0]),  # one augmentation per row
    }


def correlations(xs, ys) -> dict:
    """Pearson and Spearman correlation (ties get average ranks)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 3:
        raise ValueError("need two equal-length vectors of length >= 3")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise UndefinedCorrelation("correlation undefined on zero-variance input")
    return {
        "pearson": float(pearsonr(xs, ys).statistic),
        "spearman": float(spearmanr(xs, ys).statistic),
    }
