"""Trajectory recording primitives shared by training and topology analysis.

A LossProbe freezes, once, a data subset together with one (time, noise)
pair per point; evaluating it on successive parameter iterates yields
comparable per-sample loss vectors, which is what the trajectory
pseudometric consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmm import Dataset
from .mlp import ScoreNet, eps_forward
from .rng import stream
from .schedules import NoiseSchedule, uniform_time_measure

DEFAULT_PROBE_SUBSET = 3000


@dataclass(frozen=True)
class LossProbe:
    """Fixed (subset, time, noised input, target) quadruple for loss rows."""

    subset_indices: np.ndarray
    times: np.ndarray
    noised_points: np.ndarray
    targets: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return self.subset_indices.size

    def row(self, net: ScoreNet) -> np.ndarray:
        """Per-sample squared noise-prediction errors at the current params."""
        pred = eps_forward(net, self.times, self.noised_points)
        return ((pred - self.targets) ** 2).sum(axis=1)


def make_loss_probe(
    dataset: Dataset,
    schedule: NoiseSchedule,
    seed: int,
    subset_size: int = DEFAULT_PROBE_SUBSET,
) -> LossProbe:
    """Draw and freeze the probe: random subset, one (t, g) per point."""
    n_sub = min(dataset.n, subset_size)
    rng = stream(seed, "loss-probe")
    idx = np.sort(rng.choice(dataset.n, size=n_sub, replace=False))
    nu = uniform_time_measure(schedule)
    t = nu.times[rng.choice(len(nu), size=n_sub, p=nu.weights)]
    g = rng.standard_normal((n_sub, dataset.d))
    z = dataset.points[idx]
    sa = np.exp(-t)[:, None]  # sqrt(alpha(t))
    x = sa * z + np.sqrt(1.0 - sa * sa) * g
    return LossProbe(subset_indices=idx, times=t, noised_points=x, targets=g, seed=int(seed))


@dataclass(frozen=True)
class TrajectoryRecord:
    """Per-iterate loss vectors over a fixed probe, for iterates k0..k1."""

    rows: np.ndarray  # (k1 - k0 + 1, n_sub)
    k0: int
    k1: int
    subset_indices: np.ndarray
    probe_seed: int
    grad_norms: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", r)
        if r.ndim != 2 or r.shape[1] < 1:
            raise ValueError("rows must be a (K, n_sub) matrix with n_sub >= 1")
        if r.shape[0] != self.k1 - self.k0 + 1:
            raise ValueError("row count must match the iterate range")

    @property
    def n_iterates(self) -> int:
        return self.rows.shape[0]
