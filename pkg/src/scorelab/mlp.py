"""Time-conditioned residual MLP predicting the forward noise.

The network maps (t, x) to a noise estimate of the same dimension as x.
Time enters through a sinusoidal embedding followed by two dense layers;
each residual block injects a per-block linear transform of the time
feature into its intermediate representation.  The final layer is
zero-initialized so a fresh network predicts exactly zero.

Parameters live in one flat float64 vector with a layout table, which keeps
optimizer updates, gradient norms and serialization trivial.  Forward and
backward passes are hand-written (numpy only) so gradients are exact and
checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericalFailure
from .rng import stream

_MAX_TIME_FREQ = 1000.0


@dataclass(frozen=True)
class MlpArch:
    """Network shape. time_scale rescales t into (0, 1) for the embedding."""

    input_dim: int
    n_blocks: int = 3
    hidden: int = 32
    time_embed_dim: int = 32
    time_scale: float = 1.0

    def __post_init__(self):
        if min(self.input_dim, self.n_blocks, self.hidden, self.time_embed_dim) < 1:
            raise ValueError("all architecture dimensions must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")
        if not self.time_scale > 0:
            raise ValueError("time scale must be positive")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "time_embed_dim": self.time_embed_dim,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArch":
        return cls(
            input_dim=int(d["input_dim"]),
            n_blocks=int(d["n_blocks"]),
            hidden=int(d["hidden"]),
            time_embed_dim=int(d["time_embed_dim"]),
            time_scale=float(d["time_scale"]),
        )


def layout_for(arch: MlpArch) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table of every parameter tensor."""
    e, h, d = arch.time_embed_dim, arch.hidden, arch.input_dim
    table = [
        ("time1.w", (e, e)),
        ("time1.b", (e,)),
        ("time2.w", (e, e)),
        ("time2.b", (e,)),
        ("in.w", (d, h)),
        ("in.b", (h,)),
    ]
    for i in range(arch.n_blocks):
        table += [
            (f"block{i}.tw", (e, h)),
            (f"block{i}.tb", (h,)),
            (f"block{i}.w1", (h, h)),
            (f"block{i}.b1", (h,)),
            (f"block{i}.w2", (h, h)),
            (f"block{i}.b2", (h,)),
        ]
    table += [("out.w", (h, d)), ("out.b", (d,))]
    return table


def _layout_offsets(table: tuple[tuple[str, tuple[int, ...]], ...]) -> tuple[list[tuple[str, int, int, tuple[int, ...]]], int]:
    entries = []
    off = 0
    for name, shape in table:
        size = 1
        for s in shape:
            size *= int(s)
        entries.append((name, off, size, shape))
        off += size
    return entries, off


class ParamVector:
    """Flat float64 parameter array plus named views into it.

    Views share memory with the flat array: in-place updates through either
    side stay consistent.  The layout covers the array exactly.
    """

    def __init__(self, data: np.ndarray, table, check: bool = True):
        data = np.ascontiguousarray(data, dtype=np.float64)
        entries, total = _layout_offsets(tuple((n, tuple(s)) for n, s in table))
        if data.shape != (total,):
            raise ValueError(f"flat array has length {data.shape}, layout needs ({total},)")
        if check and not np.all(np.isfinite(data)):
            raise ValueError("parameters must be finite")
        self.data = data
        self.table = [(n, s) for n, _, _, s in entries]
        self._views = {n: self.data[o : o + sz].reshape(s) for n, o, sz, s in entries}

    def __len__(self) -> int:
        return self.data.size

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.table, check=False)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(self.data.size), self.table, check=False)


@dataclass
class ScoreNet:
    arch: MlpArch
    params: ParamVector
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for _, s in layout_for(self.arch))
        if len(self.params) != expected:
            raise ValueError(f"parameter vector length {len(self.params)} does not match arch ({expected})")


def init_params(arch: MlpArch, seed: int) -> ParamVector:
    """He-style init: weights N(0, 2/fan_in), biases zero, output layer zero."""
    table = layout_for(arch)
    chunks = []
    for idx, (name, shape) in enumerate(table):
        if name.startswith("out.") or name.endswith(".b") or name.endswith("b1") or name.endswith("b2") or name.endswith("tb"):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[0]
            std = math.sqrt(2.0 / fan_in)
            chunks.append(std * stream(seed, "mlp-init", idx).standard_normal(int(np.prod(shape))))
    return ParamVector(np.concatenate(chunks), table)


def new_net(arch: MlpArch, seed: int) -> ScoreNet:
    return ScoreNet(arch=arch, params=init_params(arch, seed), meta={"seed": int(seed), "step": 0})


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _silu_grad_from_sig(z: np.ndarray, sig: np.ndarray) -> np.ndarray:
    # derivative of z * sigmoid(z) given the cached sigmoid
    return sig * (1.0 + z * (1.0 - sig))


def time_embedding(t: np.ndarray, arch: MlpArch) -> np.ndarray:
    """Sinusoidal features of t/time_scale, frequencies geometric in [1, 1000]."""
    half = arch.time_embed_dim // 2
    u = np.asarray(t, dtype=np.float64).reshape(-1, 1) / arch.time_scale
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(np.linspace(0.0, math.log(_MAX_TIME_FREQ), half))
    ang = u * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _forward(params: ParamVector, arch: MlpArch, t: np.ndarray, x: np.ndarray, want_cache: bool):
    v = params.view
    emb = time_embedding(t, arch)
    z1 = emb @ v("time1.w") + v("time1.b")
    s1 = _sigmoid(z1)
    tau1 = z1 * s1
    z2 = tau1 @ v("time2.w") + v("time2.b")
    s2 = _sigmoid(z2)
    tau = z2 * s2
    h = x @ v("in.w") + v("in.b")
    cache = None
    if want_cache:
        cache = {"emb": emb, "z1": z1, "s1": s1, "tau1": tau1, "z2": z2, "s2": s2, "tau": tau, "x": x, "h_in": []}
    for i in range(arch.n_blocks):
        u1 = h @ v(f"block{i}.w1") + v(f"block{i}.b1") + tau @ v(f"block{i}.tw") + v(f"block{i}.tb")
        su1 = _sigmoid(u1)
        a1 = u1 * su1
        u2 = a1 @ v(f"block{i}.w2") + v(f"block{i}.b2")
        su2 = _sigmoid(u2)
        a2 = u2 * su2
        if want_cache:
            cache["h_in"].append(h)
            cache[f"u1.{i}"] = u1
            cache[f"su1.{i}"] = su1
            cache[f"a1.{i}"] = a1
            cache[f"u2.{i}"] = u2
            cache[f"su2.{i}"] = su2
        h = h + a2
    out = h @ v("out.w") + v("out.b")
    if want_cache:
        cache["h_out"] = h
    return out, cache


def eps_forward(net: ScoreNet, t, x: np.ndarray) -> np.ndarray:
    """Noise prediction at (t, x); accepts a single point or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    tb = np.full(xb.shape[0], float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    if tb.shape[0] != xb.shape[0]:
        raise ValueError("t and x batch sizes differ")
    out, _ = _forward(net.params, net.arch, tb, xb, want_cache=False)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite activation in noise network forward pass")
    return out[0] if single else out


def score_from_eps(net: ScoreNet, t, x: np.ndarray) -> np.ndarray:
    """Convert the noise prediction to the score scale: -2 eps / sqrt(1 - alpha(t)).

    This is the Lebesgue-relative score estimate (times 2); add 2x for the
    Gaussian-relative convention used by the backward sampler.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    one_minus_alpha = 1.0 - np.exp(-2.0 * t_arr)
    if np.any(one_minus_alpha < 1e-12):
        raise ValueError(f"score conversion is singular near t = 0 (got t = {t})")
    eps = eps_forward(net, t, x)
    if np.ndim(t) == 0:
        return -2.0 * eps / math.sqrt(float(one_minus_alpha))
    return -2.0 * eps / np.sqrt(one_minus_alpha)[:, None]


def sampling_score_fn(net: ScoreNet):
    """Gaussian-relative score closure for the backward sampler: 2x - 2 eps / sqrt(1 - alpha)."""

    def fn(t: float, x: np.ndarray) -> np.ndarray:
        return score_from_eps(net, t, x) + 2.0 * x

    return fn


def backprop_eps_loss(
    net: ScoreNet,
    t: np.ndarray,
    x: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, ParamVector]:
    """Mean weighted squared noise-prediction error and its exact gradient.

    loss = (1/B) sum_b w_b ||eps(t_b, x_b) - target_b||^2
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    B = x.shape[0]
    if B < 1:
        raise ValueError("batch must be nonempty")
    if weights is None:
        weights = np.ones(B)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (t.shape[0] == B and target.shape == x.shape and weights.shape[0] == B):
        raise ValueError("batch arrays must have matching leading dimension")

    arch, params = net.arch, net.params
    out, cache = _forward(params, arch, t, x, want_cache=True)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite activation in noise network forward pass")
    resid = out - target
    loss = float(np.mean(weights * (resid**2).sum(axis=1)))

    grad = params.zeros_like()
    g, v = grad.view, params.view
    dout = (2.0 / B) * weights[:, None] * resid

    g("out.w")[...] = cache["h_out"].T @ dout
    g("out.b")[...] = dout.sum(axis=0)
    dh = dout @ v("out.w").T

    dtau = np.zeros_like(cache["tau"])
    for i in reversed(range(arch.n_blocks)):
        u1, a1, u2 = cache[f"u1.{i}"], cache[f"a1.{i}"], cache[f"u2.{i}"]
        h_in = cache["h_in"][i]
        du2 = dh * _silu_grad_from_sig(u2, cache[f"su2.{i}"])
        g(f"block{i}.w2")[...] = a1.T @ du2
        g(f"block{i}.b2")[...] = du2.sum(axis=0)
        da1 = du2 @ v(f"block{i}.w2").T
        du1 = da1 * _silu_grad_from_sig(u1, cache[f"su1.{i}"])
        g(f"block{i}.w1")[...] = h_in.T @ du1
        g(f"block{i}.b1")[...] = du1.sum(axis=0)
        g(f"block{i}.tw")[...] = cache["tau"].T @ du1
        g(f"block{i}.tb")[...] = du1.sum(axis=0)
        dtau += du1 @ v(f"block{i}.tw").T
        dh = dh + du1 @ v(f"block{i}.w1").T

    g("in.w")[...] = cache["x"].T @ dh
    g("in.b")[...] = dh.sum(axis=0)

    dz2 = dtau * _silu_grad_from_sig(cache["z2"], cache["s2"])
    g("time2.w")[...] = cache["tau1"].T @ dz2
    g("time2.b")[...] = dz2.sum(axis=0)
    dtau1 = dz2 @ v("time2.w").T
    dz1 = dtau1 * _silu_grad_from_sig(cache["z1"], cache["s1"])
    g("time1.w")[...] = cache["emb"].T @ dz1
    g("time1.b")[...] = dz1.sum(axis=0)

    if not np.all(np.isfinite(grad.data)):
        raise NumericalFailure("non-finite gradient in noise network backward pass")
    return loss, grad
