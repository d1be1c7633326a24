"""Gaussian mixture data distributions with closed-form diffused scores.

Pushing an isotropic mixture through the forward process keeps it an
isotropic mixture: at time t the component means shrink to e^{-t} m_j and
the shared variance becomes sigma^2 e^{-2t} + 1 - e^{-2t}.  The same holds
for the empirical mixture over a dataset (sigma = 0, so t > 0 is required).
All densities and scores are evaluated through log-sum-exp responsibilities,
so probes far in the tails stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import NumericalFailure
from .estimates import Estimate, from_samples
from .rng import stream
from .schedules import Convention

REFERENCE_MIXTURE_WEIGHTS = (0.01, 0.1, 0.3, 0.2, 0.02, 0.15, 0.02, 0.15, 0.05)


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture: weights, means (J, d), shared variance."""

    weights: np.ndarray
    means: np.ndarray
    sigma2: float
    seed: int | None = None  # provenance of randomly drawn means, if any

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        if w.ndim != 1 or m.ndim != 2 or m.shape[0] != w.shape[0]:
            raise ValueError("weights (J,) and means (J, d) must agree")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not self.sigma2 > 0:
            raise ValueError("component variance must be positive")

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def support_radius(self) -> float:
        """Effective support bound: max_j ||m_j|| + 6 sigma."""
        return float(np.max(np.linalg.norm(self.means, axis=1)) + 6.0 * math.sqrt(self.sigma2))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "weights": [float(w) for w in self.weights],
            "means": [[float(v) for v in row] for row in self.means],
            "sigma2": float(self.sigma2),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            sigma2=float(d["sigma2"]),
            seed=d.get("seed"),
        )


def reference_mixture(d: int = 4, seed: int = 0) -> GmmSpec:
    """The nine-component imbalanced mixture with sigma = 0.05 and means
    drawn once uniformly from [-1, 1]^d under the given seed."""
    means = stream(seed, "gmm-means").uniform(-1.0, 1.0, size=(9, d))
    return GmmSpec(weights=np.asarray(REFERENCE_MIXTURE_WEIGHTS), means=means, sigma2=0.05**2, seed=seed)


@dataclass(frozen=True)
class Dataset:
    """n sample points with provenance (how they were generated)."""

    points: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", p)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("points must be a nonempty (n, d) matrix")
        if not np.all(np.isfinite(p)):
            raise ValueError("points must be finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def sample_gmm(spec: GmmSpec, n: int, seed: int) -> Dataset:
    """n i.i.d. draws: component index first, then isotropic Gaussian noise."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = stream(seed, "gmm-sample")
    comps = rng.choice(len(spec.weights), size=n, p=spec.weights)
    pts = spec.means[comps] + math.sqrt(spec.sigma2) * rng.standard_normal((n, spec.d))
    return Dataset(points=pts, provenance={"kind": "gmm", "seed": int(seed), "n": int(n)})


def sample_gmm_truncated(spec: GmmSpec, n: int, seed: int, radius: float | None = None) -> Dataset:
    """Rejection sampler confined to the ball of the given radius
    (defaults to the mixture's effective support radius)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    r = spec.support_radius if radius is None else float(radius)
    rng = stream(seed, "gmm-sample-truncated")
    rows = []
    while len(rows) < n:
        k = max(n - len(rows), 64)
        comps = rng.choice(len(spec.weights), size=k, p=spec.weights)
        pts = spec.means[comps] + math.sqrt(spec.sigma2) * rng.standard_normal((k, spec.d))
        keep = np.linalg.norm(pts, axis=1) <= r
        rows.extend(pts[keep])
    pts = np.asarray(rows[:n])
    return Dataset(points=pts, provenance={"kind": "gmm-truncated", "seed": int(seed), "n": int(n), "radius": r})


def _diffused_parameters(source, t: float) -> tuple[np.ndarray, float, np.ndarray]:
    """(means, variance, log weights) of the time-t mixture for either source."""
    emt = math.exp(-t)
    if isinstance(source, GmmSpec):
        if t < 0:
            raise ValueError("time must be nonnegative")
        var = source.sigma2 * emt * emt + 1.0 - emt * emt
        return emt * source.means, var, np.log(source.weights)
    if isinstance(source, Dataset):
        if not t > 0:
            raise ValueError("the empirical mixture is atomic at t = 0; need t > 0")
        n = source.n
        return emt * source.points, 1.0 - emt * emt, np.full(n, -math.log(n))
    raise TypeError(f"unsupported source type {type(source).__name__}")


def _mixture_log_density(x: np.ndarray, means: np.ndarray, var: float, log_w: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = means.shape[1]
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    log_comp = -0.5 * sq / var - 0.5 * d * math.log(2.0 * math.pi * var)
    return logsumexp(log_w[None, :] + log_comp, axis=1)


def _mixture_score(x: np.ndarray, means: np.ndarray, var: float, log_w: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = means.shape[1]
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    log_comp = -0.5 * sq / var - 0.5 * d * math.log(2.0 * math.pi * var)
    resp = softmax(log_w[None, :] + log_comp, axis=1)
    return -(x - resp @ means) / var


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def true_diffused_score(spec: GmmSpec, t: float, x: np.ndarray, convention: Convention = "gamma") -> np.ndarray:
    """Score of the diffused data mixture at time t (t = 0 gives the data score)."""
    xb, single = _as_batch(x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("evaluation points must be finite")
    means, var, log_w = _diffused_parameters(spec, t)
    s = _mixture_score(xb, means, var, log_w)
    if convention == "gamma":
        s = s + xb
    elif convention != "lebesgue":
        raise ValueError(f"unknown convention {convention!r}")
    return s[0] if single else s


def empirical_diffused_score(dataset: Dataset, t: float, x: np.ndarray, convention: Convention = "gamma") -> np.ndarray:
    """Score of the diffused empirical mixture over the dataset (t > 0)."""
    xb, single = _as_batch(x)
    if not np.all(np.isfinite(xb)):
        raise ValueError("evaluation points must be finite")
    means, var, log_w = _diffused_parameters(dataset, t)
    s = _mixture_score(xb, means, var, log_w)
    if convention == "gamma":
        s = s + xb
    elif convention != "lebesgue":
        raise ValueError(f"unknown convention {convention!r}")
    return s[0] if single else s


def log_density_at_time(source, t: float, x: np.ndarray) -> np.ndarray:
    """Log density (w.r.t. Lebesgue) of the diffused source at time t."""
    xb, single = _as_batch(x)
    means, var, log_w = _diffused_parameters(source, t)
    v = _mixture_log_density(xb, means, var, log_w)
    return float(v[0]) if single else v


def sample_diffused(source, t: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """m draws from the diffused source at time t (t >= 0; exact mixture draw)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        if isinstance(source, GmmSpec):
            comps = rng.choice(len(source.weights), size=m, p=source.weights)
            return source.means[comps] + math.sqrt(source.sigma2) * rng.standard_normal((m, source.d))
        if isinstance(source, Dataset):
            return source.points[rng.integers(source.n, size=m)]
        raise TypeError(f"unsupported source type {type(source).__name__}")
    means, var, log_w = _diffused_parameters(source, t)
    comps = rng.choice(len(log_w), size=m, p=np.exp(log_w))
    return means[comps] + math.sqrt(var) * rng.standard_normal((m, means.shape[1]))


def standard_normal_log_density(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    return -0.5 * (x**2).sum(axis=1) - 0.5 * d * math.log(2.0 * math.pi)


def fisher_mc(
    score_p: Callable[[np.ndarray], np.ndarray],
    score_q: Callable[[np.ndarray], np.ndarray],
    sampler_p: Callable[[int, np.random.Generator], np.ndarray],
    M: int,
    seed: int,
) -> Estimate:
    """Relative Fisher information E_p ||score_p - score_q||^2 by plain MC."""
    if M < 2:
        raise ValueError("need M >= 2 samples")
    x = sampler_p(M, stream(seed, "fisher-mc"))
    diff = np.asarray(score_p(x), dtype=np.float64) - np.asarray(score_q(x), dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise NumericalFailure("non-finite score encountered in Fisher MC")
    return from_samples((diff**2).sum(axis=1))


def kl_mc(spec: GmmSpec, M: int, seed: int) -> Estimate:
    """KL of the mixture against the standard Gaussian by plain MC."""
    if M < 2:
        raise ValueError("need M >= 2 samples")
    rng = stream(seed, "kl-mc")
    x = sample_diffused(spec, 0.0, M, rng)
    vals = log_density_at_time(spec, 0.0, x) - standard_normal_log_density(x)
    return from_samples(vals)


def second_moment(source) -> float:
    """E ||X||^2: exact for a mixture spec, empirical mean for a dataset."""
    if isinstance(source, GmmSpec):
        return float(np.dot(source.weights, (source.means**2).sum(axis=1)) + source.d * source.sigma2)
    if isinstance(source, Dataset):
        return float((source.points**2).sum(axis=1).mean())
    raise TypeError(f"unsupported source type {type(source).__name__}")
