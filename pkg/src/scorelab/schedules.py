"""Forward Ornstein-Uhlenbeck process, noise schedules and the backward sampler.

Conventions used throughout the package:

- physical diffusion time t, signal coefficient alpha(t) = exp(-2t), so the
  forward marginal given x0 is N(sqrt(alpha) x0, (1 - alpha) I).
- scores come in two flavours: "lebesgue" is the gradient of the log density
  with respect to Lebesgue measure, "gamma" is the gradient of the log density
  relative to the standard Gaussian; they differ by +x.
- the backward sampler freezes the score over each step and solves the
  resulting linear SDE exactly (exponential integrator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import NumericalFailure, ScheduleError
from .rng import stream

Convention = Literal["lebesgue", "gamma"]

#: resolution of the truncation search for the cosine schedule
_TRUNCATION_TOL = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized forward times with their signal coefficients.

    times are strictly increasing and positive; alphas[i] == exp(-2 times[i]);
    steps[i] = times[i] - times[i-1] with an implicit t0 = 0.
    """

    kind: Literal["uniform", "cosine"]
    N: int
    times: np.ndarray
    alphas: np.ndarray
    cosine_offset: float | None = None
    ratio_cap: float | None = None

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times, prepend=0.0)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        a = np.asarray(self.alphas, dtype=np.float64)
        if t.shape != (self.N,) or a.shape != (self.N,):
            raise ValueError("times/alphas must have length N")
        if not (np.all(t > 0) and np.all(np.diff(t) > 0)):
            raise ValueError("times must be strictly increasing and positive")
        if np.max(np.abs(a - np.exp(-2.0 * t))) > 1e-12:
            raise ValueError("alphas must equal exp(-2 t)")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "N": self.N,
            "s": self.cosine_offset,
            "ratio_cap": self.ratio_cap,
            "times": [float(v) for v in self.times],
            "alphas": [float(v) for v in self.alphas],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(
            kind=d["kind"],
            N=int(d["N"]),
            times=np.asarray(d["times"], dtype=np.float64),
            alphas=np.asarray(d["alphas"], dtype=np.float64),
            cosine_offset=d.get("s"),
            ratio_cap=d.get("ratio_cap"),
        )


@dataclass(frozen=True)
class TimeMeasure:
    """Finite probability measure on positive diffusion times."""

    times: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if t.shape != w.shape or t.ndim != 1:
            raise ValueError("times and weights must be 1-d arrays of equal length")
        if not np.all(t > 0):
            raise ValueError("atom times must be positive")
        if not np.all(w > 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")

    def __len__(self) -> int:
        return len(self.times)


def build_uniform_schedule(T: float, N: int) -> NoiseSchedule:
    """Times k T/N for k = 1..N, constant step h = T/N."""
    if not (T > 0):
        raise ValueError(f"horizon must be positive, got {T}")
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise ValueError(f"step count must be a positive integer, got {N}")
    times = T * np.arange(1, N + 1, dtype=np.float64) / N
    return NoiseSchedule(kind="uniform", N=int(N), times=times, alphas=np.exp(-2.0 * times))


def _cosine_alpha_bar(grid: np.ndarray, s: float) -> np.ndarray:
    f = lambda u: np.cos((u + s) / (1.0 + s) * (np.pi / 2.0))
    return f(grid) / f(0.0)


def build_cosine_schedule(N: int, s: float = 0.008, ratio_cap: float = 0.999) -> NoiseSchedule:
    """Cosine signal decay on a truncated unit grid, mapped to physical time.

    The grid has N equally spaced points on (0, 1 - zeta], where zeta is the
    smallest truncation (found by bisection to 1e-6) for which every
    consecutive signal drop 1 - abar_i/abar_{i-1} stays at or below ratio_cap.
    Physical times solve alpha(t_i) = abar_i.
    """
    if not (isinstance(N, (int, np.integer)) and N >= 2):
        raise ValueError(f"cosine schedule needs N >= 2, got {N}")
    if not (s > 0):
        raise ValueError(f"offset must be positive, got {s}")
    if not (0 < ratio_cap < 1):
        raise ValueError(f"ratio cap must lie in (0, 1), got {ratio_cap}")

    def max_drop(zeta: float) -> float:
        grid = (1.0 - zeta) * np.arange(1, N + 1, dtype=np.float64) / N
        abar = _cosine_alpha_bar(grid, s)
        prev = np.concatenate(([1.0], abar[:-1]))
        return float(np.max(1.0 - abar / prev))

    lo, hi = 0.0, 1.0 - _TRUNCATION_TOL
    if max_drop(hi) > ratio_cap:
        raise ScheduleError(f"ratio cap {ratio_cap} unsatisfiable for N={N}, s={s}")
    if max_drop(lo) <= ratio_cap:
        zeta = 0.0
    else:
        while hi - lo > _TRUNCATION_TOL:
            mid = 0.5 * (lo + hi)
            if max_drop(mid) <= ratio_cap:
                hi = mid
            else:
                lo = mid
        zeta = hi

    grid = (1.0 - zeta) * np.arange(1, N + 1, dtype=np.float64) / N
    abar = _cosine_alpha_bar(grid, s)
    if np.any(abar <= 0) or np.any(np.diff(abar) >= 0):
        raise ScheduleError("cosine signal coefficients must stay positive and strictly decreasing")
    times = -0.5 * np.log(abar)
    return NoiseSchedule(
        kind="cosine", N=int(N), times=times, alphas=abar, cosine_offset=float(s), ratio_cap=float(ratio_cap)
    )


def lambda_measure(schedule: NoiseSchedule) -> TimeMeasure:
    """Training-time measure: atom at t_k with weight proportional to its step.

    For uniform schedules this is the uniform measure on {h, 2h, ..., T},
    matching weight h/T = 1/N per atom.
    """
    w = schedule.steps / schedule.horizon
    return TimeMeasure(times=schedule.times.copy(), weights=w / w.sum())


def uniform_time_measure(schedule: NoiseSchedule) -> TimeMeasure:
    """Uniform measure on the schedule times (the epsilon-loss time measure)."""
    n = schedule.N
    return TimeMeasure(times=schedule.times.copy(), weights=np.full(n, 1.0 / n))


def alpha_of(t):
    return np.exp(-2.0 * np.asarray(t, dtype=np.float64))


def forward_sample(x0: np.ndarray, t: float, g: np.ndarray) -> np.ndarray:
    """sqrt(alpha(t)) x0 + sqrt(1 - alpha(t)) g, deterministic given g."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be nonnegative")
    a = alpha_of(t)
    return np.sqrt(a) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - a) * np.asarray(g, dtype=np.float64)


def conditional_score(x: np.ndarray, x0: np.ndarray, t: float, convention: Convention = "gamma") -> np.ndarray:
    """Score of the forward transition kernel started at x0, evaluated at x.

    lebesgue: -(x - e^{-t} x0) / (1 - e^{-2t}); gamma adds +x.
    Singular at t = 0, hence t must be positive.
    """
    if not (t > 0):
        raise ValueError(f"conditional score needs t > 0, got {t}")
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    emt = math.exp(-t)
    s = -(x - emt * x0) / (1.0 - emt * emt)
    if convention == "gamma":
        return s + x
    if convention == "lebesgue":
        return s
    raise ValueError(f"unknown convention {convention!r}")


ScoreFn = Callable[[float, np.ndarray], np.ndarray]


def ei_backward_sample(
    score_fn: ScoreFn,
    schedule: NoiseSchedule,
    m: int,
    d: int,
    seed: int,
    return_trajectory: bool = False,
) -> np.ndarray:
    """Draw m points by integrating the backward SDE with frozen per-step drift.

    Chains start at the standard Gaussian.  Backward steps walk the schedule
    times largest-first; the step from forward time t_i down to t_{i-1} has
    length h_i, freezes the drift at c = score_fn(t_i, X), and applies the
    exact solution of the resulting linear SDE:

        X <- e^{-h} X + (1 - e^{-h}) c + sqrt(1 - e^{-2h}) G.

    Each chain consumes its own random stream keyed by its index, so chain j
    is identical regardless of m.  score_fn maps (t, points (m, d)) -> (m, d).
    Returns (m, d), or (N + 1, m, d) when return_trajectory is set.
    """
    if m < 1 or d < 1:
        raise ValueError("need m >= 1 chains of dimension d >= 1")
    N = schedule.N
    draws = np.empty((N + 1, m, d))
    for j in range(m):
        draws[:, j, :] = stream(seed, "ei-chain", j).standard_normal((N + 1, d))
    x = draws[0]
    steps = schedule.steps
    trajectory = [x.copy()] if return_trajectory else None
    for k in range(N):
        i = N - 1 - k  # forward-time index, largest time first
        t_i = schedule.times[i]
        h = steps[i]
        c = np.asarray(score_fn(float(t_i), x), dtype=np.float64)
        if not np.all(np.isfinite(c)):
            raise NumericalFailure(f"non-finite score at backward step {k} (forward time {t_i:.6g})")
        emh = math.exp(-h)
        x = emh * x + (1.0 - emh) * c + math.sqrt(1.0 - emh * emh) * draws[k + 1]
        if return_trajectory:
            trajectory.append(x.copy())
    return np.stack(trajectory) if return_trajectory else x
