"""Monte Carlo estimates with attached standard errors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """A scalar MC estimate: value, standard error of the mean, sample count."""

    value: float
    stderr: float
    M: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "M": self.M}


def from_samples(samples: np.ndarray) -> Estimate:
    """Sample mean with its standard error (ddof=1; zero for a single sample)."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    M = s.size
    if M < 1:
        raise ValueError("need at least one sample")
    se = 0.0 if M == 1 else float(np.std(s, ddof=1) / math.sqrt(M))
    return Estimate(value=float(s.mean()), stderr=se, M=M)


def combine_linear(coeffs_and_terms: list[tuple[float, Estimate]]) -> Estimate:
    """Linear combination of independent estimates with error propagation."""
    value = sum(c * e.value for c, e in coeffs_and_terms)
    var = sum((c * e.stderr) ** 2 for c, e in coeffs_and_terms)
    M = min(e.M for _, e in coeffs_and_terms)
    return Estimate(value=float(value), stderr=float(math.sqrt(var)), M=M)
