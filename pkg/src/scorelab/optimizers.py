"""SGLD and Adam training loops with gradient-norm instrumentation.

SGLD follows the recursion

    theta <- (1 - a eta_k) theta - eta_k g_k + sqrt(2 eta_k / beta) xi_k

with xi_k standard normal and beta the inverse temperature.  The training
objective is the noise-prediction loss: per batch point one time atom and
one Gaussian are drawn.  Gradient norms are recorded every step; they feed
the generalization bound and the gradient-norm proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalFailure
from .gmm import Dataset
from .mlp import ScoreNet, backprop_eps_loss
from .rng import stream
from .schedules import NoiseSchedule, uniform_time_measure
from .trajectory import LossProbe, TrajectoryRecord

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class SgldConfig:
    """Step sizes (scalar or per-step), regularization a, inverse temperature."""

    eta: float | np.ndarray
    beta: float
    steps: int
    batch_size: int
    a: float = 0.0
    sigma0: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        etas = self.etas()
        if np.any(etas < 0):
            raise ConfigError("step sizes must be nonnegative")
        if etas.shape != (self.steps,):
            raise ConfigError(f"need one step size or {self.steps} of them")
        if not self.beta > 0:
            raise ConfigError("inverse temperature must be positive")
        if self.a < 0:
            raise ConfigError("regularization must be nonnegative")
        if etas.size and float(np.max(etas) * self.a) >= 1.0:
            raise ConfigError("sup_k(eta_k * a) must stay below 1")
        if self.a > 0 and self.sigma0 * math.sqrt(self.beta * self.a) > math.sqrt(2.0):
            raise ConfigError("init scale violates sigma0 * sqrt(beta a) <= sqrt(2)")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("need steps >= 0 and batch_size >= 1")

    def etas(self) -> np.ndarray:
        e = np.asarray(self.eta, dtype=np.float64)
        return np.full(self.steps, float(e)) if e.ndim == 0 else e


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    steps: int
    batch_size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("need steps >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class GradStats:
    """Per-step squared gradient norms, losses, and step sizes."""

    sq_grad_norms: np.ndarray
    losses: np.ndarray
    etas: np.ndarray

    def __post_init__(self):
        if not (self.sq_grad_norms.shape == self.losses.shape == self.etas.shape):
            raise ValueError("stat arrays must have equal length")
        if np.any(self.sq_grad_norms < 0):
            raise ValueError("squared norms must be nonnegative")

    def __len__(self) -> int:
        return self.sq_grad_norms.size

    def partial_sums(self) -> np.ndarray:
        """S_k = sum_{j<k} eta_j for k = 0..K (nondecreasing, S_0 = 0)."""
        return np.concatenate(([0.0], np.cumsum(self.etas)))

    def avg_sq_grad(self) -> float:
        return float(self.sq_grad_norms.mean()) if len(self) else float("nan")


def last_window_avg(stats: GradStats, window: int = 200) -> float:
    """Mean squared gradient norm over the last min(window, K) steps."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(stats) == 0:
        return float("nan")
    return float(stats.sq_grad_norms[-window:].mean())


def sgld_step(params: np.ndarray, grad: np.ndarray, config: SgldConfig, k: int, rng: np.random.Generator) -> np.ndarray:
    """One SGLD update with fresh Gaussian noise."""
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure(f"non-finite gradient at step {k}")
    eta = float(config.etas()[k])
    noise = math.sqrt(2.0 * eta / config.beta) * rng.standard_normal(params.shape)
    return (1.0 - config.a * eta) * params - eta * grad + noise


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState, config: AdamConfig, k: int
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update (k is the 0-based step index)."""
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure(f"non-finite gradient at step {k}")
    t = k + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new, AdamState(m=m, v=v)


@dataclass
class TrainResult:
    net: ScoreNet
    stats: GradStats
    trajectory: TrajectoryRecord | None = None


def train(
    net: ScoreNet,
    dataset: Dataset,
    schedule: NoiseSchedule,
    config: SgldConfig | AdamConfig,
    seed: int,
    probe: LossProbe | None = None,
) -> TrainResult:
    """Minibatch training on the noise-prediction loss.

    Per step: draw a batch, one time atom and one Gaussian per point, take a
    gradient step, and record the squared gradient norm and loss.  When a
    probe is given, its per-sample loss row is recorded at every iterate
    (including the initial one), yielding a TrajectoryRecord.

    The input net is not mutated; the trained copy is returned.
    """
    out = ScoreNet(arch=net.arch, params=net.params.copy(), meta=dict(net.meta))
    n = dataset.n
    batch = min(config.batch_size, n)
    nu = uniform_time_measure(schedule)
    rng = stream(seed, "train")
    K = config.steps

    sq_norms = np.empty(K)
    losses = np.empty(K)
    etas = config.etas() if isinstance(config, SgldConfig) else np.full(K, config.lr)
    adam_state = AdamState.zeros(len(out.params)) if isinstance(config, AdamConfig) else None
    rows = [probe.row(out)] if probe is not None else None
    grad_norm_rows = [] if probe is not None else None

    for k in range(K):
        idx = rng.choice(n, size=batch, replace=False) if batch < n else np.arange(n)
        z = dataset.points[idx]
        t = nu.times[rng.choice(len(nu), size=batch, p=nu.weights)]
        g = rng.standard_normal((batch, dataset.d))
        sa = np.exp(-t)[:, None]  # sqrt(alpha(t))
        x = sa * z + np.sqrt(1.0 - sa * sa) * g

        loss, grad = backprop_eps_loss(out, t, x, g)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalFailure(
                f"training diverged at step {k}: loss={loss:.6g}, grad_norm={np.linalg.norm(grad.data):.6g}"
            )
        gvec = grad.data
        if config.clip_norm is not None:
            gnorm = float(np.linalg.norm(gvec))
            if gnorm > config.clip_norm:
                gvec = gvec * (config.clip_norm / gnorm)
        sq_norms[k] = float(gvec @ gvec)
        losses[k] = loss

        if isinstance(config, SgldConfig):
            out.params.data[...] = sgld_step(out.params.data, gvec, config, k, rng)
        else:
            new, adam_state = adam_step(out.params.data, gvec, adam_state, config, k)
            out.params.data[...] = new

        if probe is not None:
            rows.append(probe.row(out))
            grad_norm_rows.append(sq_norms[k])

    out.meta["step"] = int(out.meta.get("step", 0)) + K
    stats = GradStats(sq_grad_norms=sq_norms, losses=losses, etas=etas)
    trajectory = None
    if probe is not None:
        k0 = int(net.meta.get("step", 0))
        trajectory = TrajectoryRecord(
            rows=np.asarray(rows),
            k0=k0,
            k1=k0 + K,
            subset_indices=probe.subset_indices,
            probe_seed=probe.seed,
            grad_norms=np.asarray([math.nan] + grad_norm_rows),
            meta={"optimizer": type(config).__name__},
        )
    return TrainResult(net=out, stats=stats, trajectory=trajectory)


def sgld_generalization_bound(
    stats: GradStats, config: SgldConfig, tau: float, delta: float, n: int
) -> float:
    """Evaluate the gradient-norm generalization bound on observed statistics.

    (2 tau / sqrt(n)) * sqrt( (beta/2) sum_k eta_k e^{-(a/2)(S_K - S_k)} |g_k|^2
                              + log(3/delta) )

    Observed squared norms stand in for their conditional expectations.
    """
    if not tau > 0:
        raise ConfigError("subgaussian constant must be positive")
    # log(3/delta) must stay nonnegative; the usual confidence range is (0, 1)
    if not (0 < delta <= 3):
        raise ConfigError("delta must lie in (0, 3]")
    etas = config.etas()
    K = len(stats)
    if etas.shape != (K,):
        raise ConfigError("config step count must match recorded statistics")
    S = stats.partial_sums()
    decay = np.exp(-(config.a / 2.0) * (S[K] - S[:K]))
    inner = (config.beta / 2.0) * float(np.sum(etas * decay * stats.sq_grad_norms)) + math.log(3.0 / delta)
    return (2.0 * tau / math.sqrt(n)) * math.sqrt(inner)


def grad_norm_proxy(n: int, eta: float, beta: float, avg_sq_grad: float) -> float:
    """sqrt(eta * beta * <|g|^2>) / n, the scalar tracked against the gap."""
    if n < 1 or eta < 0 or beta < 0 or avg_sq_grad < 0:
        raise ValueError("proxy inputs must be nonnegative with n >= 1")
    return math.sqrt(eta * beta * avg_sq_grad) / n


def batch_inverse_temperature(batch_size: int, eta: float) -> float:
    """Heuristic inverse temperature b / eta for noise-free optimizers."""
    if batch_size < 1 or not eta > 0:
        raise ValueError("need batch_size >= 1 and eta > 0")
    return batch_size / eta
