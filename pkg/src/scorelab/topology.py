"""Topological complexity of optimization trajectories.

Iterates are compared through a data-dependent pseudometric: the mean
absolute difference between their per-sample loss vectors on a fixed probe.
Two scale-sensitive complexities are computed on the resulting finite metric
space: the total edge length of a minimum spanning tree (the order-1
lifetime sum of zeroth persistent homology) and the positive magnitude,
i.e. the sum of positive entries of the weighting vector solving
sum_b exp(-r rho(a, b)) beta(b) = 1 for every point a.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MagnitudeError
from .gmm import Dataset
from .mlp import ScoreNet
from .optimizers import AdamConfig, SgldConfig, TrainResult, train
from .rng import stream
from .schedules import NoiseSchedule
from .trajectory import DEFAULT_PROBE_SUBSET, TrajectoryRecord, make_loss_probe

_DEDUP_TOL = 1e-12
_JITTER = 1e-10
_BLOCK = 64
SMALL_SCALE = 1e-2


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative matrix with zero diagonal (a pseudometric)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if np.max(np.abs(v - v.T), initial=0.0) > 1e-12:
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(v) != 0.0) or np.any(v < 0):
            raise ValueError("distances must be nonnegative with zero diagonal")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def check_triangle(self, rng: np.random.Generator, triples: int = 200, tol: float = 1e-9) -> bool:
        """Spot-check the triangle inequality on random index triples."""
        v = self.values
        if self.K < 3:
            return True
        idx = rng.integers(0, self.K, size=(triples, 3))
        i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
        return bool(np.all(v[i, k] <= v[i, j] + v[j, k] + tol))


@dataclass(frozen=True)
class BoundParams:
    """Inputs shared by the trajectory generalization bounds."""

    loss_bound: float
    delta: float
    mutual_info: float = 0.0  # surrogate; not estimated
    r: float = 1.0
    L: float = 1.0  # scale multiplier inside the magnitude bound; not pinned down

    def __post_init__(self):
        if not self.loss_bound > 0:
            raise ConfigError("loss bound must be positive")
        if not (0 < self.delta < 1):
            raise ConfigError("delta must lie in (0, 1)")
        if not self.r > 0:
            raise ConfigError("magnitude scale must be positive")


def record_trajectory(
    net: ScoreNet,
    dataset: Dataset,
    schedule: NoiseSchedule,
    config: SgldConfig | AdamConfig,
    seed: int,
    subset_size: int = DEFAULT_PROBE_SUBSET,
) -> TrainResult:
    """Continue optimization from the given net, recording per-iterate loss
    vectors on a frozen probe (same subset/time/noise for every iterate)."""
    probe = make_loss_probe(dataset, schedule, seed, subset_size=subset_size)
    return train(net, dataset, schedule, config, seed=seed, probe=probe)


def pseudometric_matrix(record: TrajectoryRecord) -> DistanceMatrix:
    """Mean absolute difference between per-sample loss rows, all pairs.

    Assembled in row/column blocks so no (K, K, n_sub) intermediate is
    materialized.
    """
    rows = record.rows
    K = rows.shape[0]
    out = np.zeros((K, K))
    for i0 in range(0, K, _BLOCK):
        a = rows[i0 : i0 + _BLOCK]
        for j0 in range(i0, K, _BLOCK):
            b = rows[j0 : j0 + _BLOCK]
            d = np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)
            out[i0 : i0 + a.shape[0], j0 : j0 + b.shape[0]] = d
            out[j0 : j0 + b.shape[0], i0 : i0 + a.shape[0]] = d.T
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(values=out)


def mst_lifetime_sum(dist: DistanceMatrix) -> float:
    """Total edge cost of a minimum spanning tree (dense Prim); 0 for K = 1."""
    v = dist.values
    K = dist.K
    if K == 1:
        return 0.0
    visited = np.zeros(K, dtype=bool)
    visited[0] = True
    best = v[0].copy()
    best[0] = np.inf
    total = 0.0
    for _ in range(K - 1):
        j = int(np.argmin(np.where(visited, np.inf, best)))
        total += float(best[j])
        visited[j] = True
        best = np.minimum(best, v[j])
    return total


def _dedup_indices(v: np.ndarray, tol: float = _DEDUP_TOL) -> list[int]:
    keep: list[int] = []
    for i in range(v.shape[0]):
        if all(v[i, j] >= tol for j in keep):
            keep.append(i)
    return keep


def magnitude_weighting(dist: DistanceMatrix, r: float) -> tuple[np.ndarray, float]:
    """Solve the exponential-kernel system for the weighting vector.

    Points closer than 1e-12 are merged first.  If the dense solve reports a
    singular system, one Tikhonov jitter of 1e-10 on the diagonal is tried.
    Returns (weighting over deduplicated points, condition number).
    """
    if not r > 0:
        raise ValueError("scale must be positive")
    keep = _dedup_indices(dist.values)
    sub = dist.values[np.ix_(keep, keep)]
    A = np.exp(-r * sub)
    ones = np.ones(len(keep))
    try:
        beta = np.linalg.solve(A, ones)
    except np.linalg.LinAlgError:
        try:
            beta = np.linalg.solve(A + _JITTER * np.eye(len(keep)), ones)
        except np.linalg.LinAlgError as exc:
            raise MagnitudeError(f"weighting system singular after jitter at scale r={r}") from exc
    if not np.all(np.isfinite(beta)):
        raise MagnitudeError(f"non-finite weighting at scale r={r}")
    return beta, float(np.linalg.cond(A))


def positive_magnitude(dist: DistanceMatrix, r: float) -> float:
    """Sum of positive weighting entries at scale r (1.0 for a single point)."""
    beta, _ = magnitude_weighting(dist, r)
    return float(np.clip(beta, 0.0, None).sum())


def standard_scales(n: int) -> dict[str, float]:
    """The two magnitude scales tracked in experiments: sqrt(n) and 1e-2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return {"sqrt_n": math.sqrt(n), "small": SMALL_SCALE}


def trajectory_bound_rhs(
    complexity: float,
    params: BoundParams,
    n: int,
    variant: str,
) -> float:
    """Evaluate a trajectory-complexity generalization bound.

    variant "lifetime_sum": complexity is the MST lifetime sum E1; the bound
    is B sqrt((log(1 + (4 sqrt(n)/B) E1) + 1 + I + log(1/delta)) / n) with
    hidden constant 1.

    variant "magnitude": complexity is PMag evaluated at scale L * r; the
    bound is (2/r) log PMag + r B^2 / n + 3 B sqrt((I + log(1/delta)) / n).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    B, delta, info = params.loss_bound, params.delta, params.mutual_info
    if variant == "lifetime_sum":
        inner = math.log1p((4.0 * math.sqrt(n) / B) * complexity) + 1.0 + info + math.log(1.0 / delta)
        return B * math.sqrt(inner / n)
    if variant == "magnitude":
        return (
            (2.0 / params.r) * math.log(complexity)
            + params.r * B * B / n
            + 3.0 * B * math.sqrt((info + math.log(1.0 / delta)) / n)
        )
    raise ValueError(f"unknown bound variant {variant!r}")


def minimize_magnitude_bound(
    dist: DistanceMatrix,
    params: BoundParams,
    n: int,
    r_grid: np.ndarray | None = None,
) -> dict:
    """Minimize the magnitude bound over a log-grid of scales r."""
    if r_grid is None:
        r_grid = np.logspace(-2, math.log10(max(math.sqrt(n), 1.0)) + 1.0, 13)
    best = None
    for r in r_grid:
        pmag = positive_magnitude(dist, params.L * float(r))
        p = BoundParams(
            loss_bound=params.loss_bound, delta=params.delta,
            mutual_info=params.mutual_info, r=float(r), L=params.L,
        )
        val = trajectory_bound_rhs(pmag, p, n, "magnitude")
        if best is None or val < best["bound"]:
            best = {"bound": val, "r": float(r), "pmag": pmag}
    return best


def topology_report(
    record: TrajectoryRecord,
    n: int,
    params: BoundParams,
    scales: dict[str, float] | None = None,
    seed: int = 0,
) -> dict:
    """Full topology summary: E1, PMag per scale, condition numbers, bounds."""
    dist = pseudometric_matrix(record)
    if not dist.check_triangle(stream(seed, "triangle-check")):
        raise ValueError("pseudometric failed the triangle spot-check")
    e1 = mst_lifetime_sum(dist)
    scales = standard_scales(n) if scales is None else scales
    pmag, cond = {}, {}
    for name, r in scales.items():
        beta, c = magnitude_weighting(dist, float(r))
        pmag[name] = float(np.clip(beta, 0.0, None).sum())
        cond[name] = c
    bounds = {
        "lifetime_sum": trajectory_bound_rhs(e1, params, n, "lifetime_sum"),
        "magnitude": {
            name: trajectory_bound_rhs(
                positive_magnitude(dist, params.L * float(r)),
                BoundParams(params.loss_bound, params.delta, params.mutual_info, float(r), params.L),
                n,
                "magnitude",
            )
            for name, r in scales.items()
        },
    }
    return {
        "n_iterates": record.n_iterates,
        "k0": record.k0,
        "k1": record.k1,
        "E1": e1,
        "PMag": pmag,
        "condition_number": cond,
        "bounds": bounds,
        "up_to_constant": True,
        "mutual_info_surrogate": params.mutual_info,
    }
