"""Loss and gap functionals for score estimation, as Monte Carlo estimators.

Every functional integrates a squared score discrepancy over (data point,
time atom, forward noise).  The pieces that can be compared are:

- model score  a(t, x)            (pluggable closure, Gaussian-relative, x2)
- conditional  b(t, x; z) = 2 * conditional_score(x, z, t, "gamma")
- true marginal c(t, x)   = 2 * true_diffused_score(spec, t, x, "gamma")
- empirical marginal e(t, x) = 2 * empirical_diffused_score(dataset, t, x, "gamma")

score_error = |a-c|^2 on true data, population risk = |a-b|^2 on true data,
empirical denoising loss = |a-b|^2 on the dataset, explicit matching loss
= |a-e|^2 on the dataset, and the two mismatch terms |c-b|^2 / |b-e|^2
tie them together in the exact decomposition

    score_error = esm + (population risk - empirical dsm) + (mismatch_empirical - mismatch_true).

With common random numbers the estimators share draws, so the decomposition
residual is estimated with strongly reduced variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalFailure
from .estimates import Estimate, combine_linear, from_samples
from .gmm import (
    Dataset,
    GmmSpec,
    empirical_diffused_score,
    fisher_mc,
    sample_diffused,
    true_diffused_score,
)
from .mlp import ScoreNet, eps_forward
from .rng import spawn_seed, stream
from .schedules import NoiseSchedule, ScoreFn, TimeMeasure, conditional_score

_CHUNK_ROWS = 1 << 18


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo budget: M draws per atom, a seed, and variance options."""

    samples_per_atom: int
    seed: int
    common_random_numbers: bool = True
    antithetic: bool = False

    def __post_init__(self):
        if self.samples_per_atom < 2:
            raise ConfigError("need at least 2 samples per atom")
        if self.antithetic and self.samples_per_atom % 2 != 0:
            raise ConfigError("antithetic pairing needs an even sample count")


@dataclass(frozen=True)
class DecompositionReport:
    """All terms of the score-error decomposition plus its residual."""

    score_error: Estimate
    dsm: Estimate
    esm: Estimate
    gen_gap: Estimate
    mismatch_true: Estimate
    mismatch_empirical: Estimate
    mismatch_gap: Estimate
    residual: Estimate

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in (
            "score_error", "dsm", "esm", "gen_gap",
            "mismatch_true", "mismatch_empirical", "mismatch_gap", "residual",
        )}


def _normal_draws(rng: np.random.Generator, M: int, d: int, antithetic: bool) -> np.ndarray:
    if antithetic:
        half = rng.standard_normal((M // 2, d))
        return np.concatenate([half, -half], axis=0)
    return rng.standard_normal((M, d))


def _sq_norm(v: np.ndarray) -> np.ndarray:
    return (v**2).sum(axis=-1)


_POP_TERMS = ("model_vs_true", "model_vs_cond", "true_vs_cond")
_EMP_TERMS = ("model_vs_cond", "model_vs_emp", "cond_vs_emp")


def _population_atom_draws(
    terms: tuple[str, ...],
    score_fn: ScoreFn | None,
    spec: GmmSpec | Dataset,
    measure: TimeMeasure,
    mc: McConfig,
) -> dict[str, list[np.ndarray]]:
    """Per-atom, per-draw weighted integrand samples on fresh data draws.

    With common random numbers one (z, g) set is shared by all atoms and
    terms; otherwise each (term, atom) cell gets its own draws.  A Dataset
    source means the population is the uniform law over its atoms (only
    conditional-target terms support this).
    """
    M, d = mc.samples_per_atom, spec.d
    out: dict[str, list[np.ndarray]] = {t: [] for t in terms}
    if mc.common_random_numbers:
        z = sample_diffused(spec, 0.0, M, stream(mc.seed, "pop-data"))
        g = _normal_draws(stream(mc.seed, "pop-noise"), M, d, mc.antithetic)
        for t, w in zip(measure.times, measure.weights):
            vals = _population_cell(terms, score_fn, spec, float(t), z, g)
            for name in terms:
                out[name].append(w * vals[name])
        return out
    for name in terms:
        for k, (t, w) in enumerate(zip(measure.times, measure.weights)):
            z = sample_diffused(spec, 0.0, M, stream(mc.seed, f"pop-data:{name}", k))
            g = _normal_draws(stream(mc.seed, f"pop-noise:{name}", k), M, d, mc.antithetic)
            vals = _population_cell((name,), score_fn, spec, float(t), z, g)
            out[name].append(w * vals[name])
    return out


def _population_cell(terms, score_fn, spec, t, z, g) -> dict[str, np.ndarray]:
    emt = math.exp(-t)  # sqrt(alpha(t))
    x = emt * z + math.sqrt(1.0 - emt * emt) * g
    need_a = any(name.startswith("model") for name in terms)
    a = np.asarray(score_fn(t, x), dtype=np.float64) if need_a else None
    b = 2.0 * conditional_score(x, z, t, "gamma")
    c = 2.0 * true_diffused_score(spec, t, x, "gamma") if any("true" in n for n in terms) else None
    if need_a and not np.all(np.isfinite(a)):
        raise NumericalFailure(f"non-finite model score at t={t}")
    vals = {}
    for name in terms:
        if name == "model_vs_true":
            vals[name] = _sq_norm(a - c)
        elif name == "model_vs_cond":
            vals[name] = _sq_norm(a - b)
        elif name == "true_vs_cond":
            vals[name] = _sq_norm(c - b)
        else:
            raise ValueError(f"unknown population term {name}")
    return vals


def _empirical_atom_draws(
    terms: tuple[str, ...],
    score_fn: ScoreFn | None,
    dataset: Dataset,
    measure: TimeMeasure,
    mc: McConfig,
) -> dict[str, list[np.ndarray]]:
    """Per-atom, per-draw integrand samples averaged exactly over the dataset.

    Draw m pairs one noise vector per (dataset point, draw) cell; with common
    random numbers the same noise is reused for every atom and term, so the
    sum across atoms of these vectors is a paired sample of the measure-
    integrated loss.
    """
    M, d, n = mc.samples_per_atom, dataset.d, dataset.n
    out: dict[str, list[np.ndarray]] = {t: [] for t in terms}
    if mc.common_random_numbers:
        g = _normal_draws(stream(mc.seed, "dsm-noise"), M, d, mc.antithetic)
        for t, w in zip(measure.times, measure.weights):
            vals = _empirical_cell(terms, score_fn, dataset, float(t), g)
            for name in terms:
                out[name].append(w * vals[name])
        return out
    for name in terms:
        for k, (t, w) in enumerate(zip(measure.times, measure.weights)):
            g = _normal_draws(stream(mc.seed, f"dsm-noise:{name}", k), M, d, mc.antithetic)
            vals = _empirical_cell((name,), score_fn, dataset, float(t), g)
            out[name].append(w * vals[name])
    return out


def _empirical_cell(terms, score_fn, dataset, t, g) -> dict[str, np.ndarray]:
    """Per-draw samples of the dataset-averaged integrand at one time atom.

    The same g[m] is used for every dataset point, so per-draw values are
    exchangeable in the dataset order (exact permutation invariance).
    Evaluation is chunked over draws to bound memory.
    """
    n, d = dataset.points.shape
    M = g.shape[0]
    sa = math.exp(-t)  # sqrt(alpha(t))
    sg = math.sqrt(1.0 - sa * sa)
    need_a = any(name.startswith("model") for name in terms)
    need_e = any(name.endswith("emp") for name in terms)
    chunk = max(1, _CHUNK_ROWS // n)
    acc = {name: np.empty(M) for name in terms}
    z = dataset.points
    for lo in range(0, M, chunk):
        gc = g[lo : lo + chunk]  # (C, d)
        C = gc.shape[0]
        x = sa * z[:, None, :] + sg * gc[None, :, :]  # (n, C, d)
        xf = x.reshape(n * C, d)
        b = 2.0 * conditional_score(xf, np.repeat(z, C, axis=0), t, "gamma")
        a = np.asarray(score_fn(t, xf), dtype=np.float64) if need_a else None
        e = 2.0 * empirical_diffused_score(dataset, t, xf, "gamma") if need_e else None
        if need_a and not np.all(np.isfinite(a)):
            raise NumericalFailure(f"non-finite model score at t={t}")
        for name in terms:
            if name == "model_vs_cond":
                v = _sq_norm(a - b)
            elif name == "model_vs_emp":
                v = _sq_norm(a - e)
            elif name == "cond_vs_emp":
                v = _sq_norm(b - e)
            else:
                raise ValueError(f"unknown empirical term {name}")
            acc[name][lo : lo + C] = v.reshape(n, C).mean(axis=0)
    return acc


def _estimate(atom_vectors: list[np.ndarray], crn: bool) -> Estimate:
    if crn:
        return from_samples(np.sum(atom_vectors, axis=0))
    value = sum(float(v.mean()) for v in atom_vectors)
    var = sum(float(np.var(v, ddof=1)) / v.size for v in atom_vectors)
    M = atom_vectors[0].size
    return Estimate(value=value, stderr=math.sqrt(var), M=M)


def denoising_loss(score_fn: ScoreFn, z: np.ndarray, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Denoising loss at one data point: E |a - b|^2 integrated over the measure."""
    ds = Dataset(points=np.atleast_2d(np.asarray(z, dtype=np.float64)))
    vecs = _empirical_atom_draws(("model_vs_cond",), score_fn, ds, measure, mc)
    return _estimate(vecs["model_vs_cond"], mc.common_random_numbers)


def empirical_dsm(score_fn: ScoreFn, dataset: Dataset, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Empirical risk: dataset average of the denoising loss (exact over points)."""
    vecs = _empirical_atom_draws(("model_vs_cond",), score_fn, dataset, measure, mc)
    return _estimate(vecs["model_vs_cond"], mc.common_random_numbers)


def population_risk(score_fn: ScoreFn, spec: GmmSpec | Dataset, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Population denoising risk, fresh data draw per MC sample.

    The population source may itself be a Dataset, meaning the uniform law
    over its atoms (useful for checking that the gap vanishes when the
    population is exactly the empirical measure).
    """
    vecs = _population_atom_draws(("model_vs_cond",), score_fn, spec, measure, mc)
    return _estimate(vecs["model_vs_cond"], mc.common_random_numbers)


def gen_gap(score_fn: ScoreFn, dataset: Dataset, spec: GmmSpec | Dataset, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Score generalization gap: population risk minus empirical risk."""
    pop = population_risk(score_fn, spec, measure, mc)
    emp = empirical_dsm(score_fn, dataset, measure, mc)
    return combine_linear([(1.0, pop), (-1.0, emp)])


def esm_loss(score_fn: ScoreFn, dataset: Dataset, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Explicit matching loss against the empirical diffused score."""
    vecs = _empirical_atom_draws(("model_vs_emp",), score_fn, dataset, measure, mc)
    return _estimate(vecs["model_vs_emp"], mc.common_random_numbers)


def score_error(score_fn: ScoreFn, spec: GmmSpec, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Score estimation error against the true diffused score, on true data."""
    vecs = _population_atom_draws(("model_vs_true",), score_fn, spec, measure, mc)
    return _estimate(vecs["model_vs_true"], mc.common_random_numbers)


def mismatch_true(spec: GmmSpec, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Mean squared gap between marginal and conditional scores on true data
    (the theta-independent constant of the decomposition; nonnegative)."""
    vecs = _population_atom_draws(("true_vs_cond",), None, spec, measure, mc)
    return _estimate(vecs["true_vs_cond"], mc.common_random_numbers)


def mismatch_empirical(dataset: Dataset, measure: TimeMeasure, mc: McConfig) -> Estimate:
    """Empirical counterpart: conditional vs empirical-marginal score gap."""
    vecs = _empirical_atom_draws(("cond_vs_emp",), None, dataset, measure, mc)
    return _estimate(vecs["cond_vs_emp"], mc.common_random_numbers)


def decompose(
    score_fn: ScoreFn,
    dataset: Dataset,
    spec: GmmSpec,
    measure: TimeMeasure,
    mc: McConfig,
) -> DecompositionReport:
    """Estimate every decomposition term and the identity residual.

    With common random numbers, terms on each side share draws and the
    residual is computed from paired per-draw samples; its stderr then
    reflects the (small) coupled variance rather than term-level noise.
    """
    crn = mc.common_random_numbers
    pop = _population_atom_draws(_POP_TERMS, score_fn, spec, measure, mc)
    emp = _empirical_atom_draws(_EMP_TERMS, score_fn, dataset, measure, mc)

    e_score_error = _estimate(pop["model_vs_true"], crn)
    e_risk = _estimate(pop["model_vs_cond"], crn)
    e_ct = _estimate(pop["true_vs_cond"], crn)
    e_dsm = _estimate(emp["model_vs_cond"], crn)
    e_esm = _estimate(emp["model_vs_emp"], crn)
    e_chat = _estimate(emp["cond_vs_emp"], crn)

    e_gap = combine_linear([(1.0, e_risk), (-1.0, e_dsm)])
    e_delta = combine_linear([(1.0, e_chat), (-1.0, e_ct)])

    if crn:
        pop_res = (
            np.sum(pop["model_vs_true"], axis=0)
            - np.sum(pop["model_vs_cond"], axis=0)
            + np.sum(pop["true_vs_cond"], axis=0)
        )
        emp_res = (
            np.sum(emp["model_vs_cond"], axis=0)
            - np.sum(emp["model_vs_emp"], axis=0)
            - np.sum(emp["cond_vs_emp"], axis=0)
        )
        p, q = from_samples(pop_res), from_samples(emp_res)
        residual = Estimate(p.value + q.value, math.hypot(p.stderr, q.stderr), mc.samples_per_atom)
    else:
        residual = combine_linear([
            (1.0, e_score_error), (-1.0, e_esm), (-1.0, e_gap), (-1.0, e_delta),
        ])

    return DecompositionReport(
        score_error=e_score_error,
        dsm=e_dsm,
        esm=e_esm,
        gen_gap=e_gap,
        mismatch_true=e_ct,
        mismatch_empirical=e_chat,
        mismatch_gap=e_delta,
        residual=residual,
    )


def epsilon_loss(net: ScoreNet, dataset: Dataset, nu: TimeMeasure, mc: McConfig) -> Estimate:
    """Noise-prediction loss: per draw, each data point gets one random
    (time, noise) pair; the value is the dataset-averaged squared error."""
    n, d = dataset.points.shape
    M = mc.samples_per_atom
    rng = stream(mc.seed, "eps-eval")
    samples = np.empty(M)
    for m in range(M):
        ti = rng.choice(len(nu), size=n, p=nu.weights)
        t = nu.times[ti]
        g = rng.standard_normal((n, d))
        sa = np.exp(-t)[:, None]  # sqrt(alpha(t))
        x = sa * dataset.points + np.sqrt(1.0 - sa * sa) * g
        pred = eps_forward(net, t, x)
        samples[m] = float(_sq_norm(pred - g).mean())
    return from_samples(samples)


def kl_bound_terms(eps_s: float, kl_mu_gamma: float, fisher_mu_gamma: float, T: float, h: float) -> dict:
    """The three-term KL guarantee with the hidden universal constant set to 1."""
    init_term = math.exp(-2.0 * T) * kl_mu_gamma
    score_term = T * eps_s
    discretization_term = h * fisher_mu_gamma
    return {
        "init_term": init_term,
        "score_term": score_term,
        "discretization_term": discretization_term,
        "total": init_term + score_term + discretization_term,
        "up_to_constant": True,
    }


def mismatch_gap_bound_report(
    dataset: Dataset,
    spec: GmmSpec,
    measure: TimeMeasure,
    delta: float,
    mc: McConfig,
) -> dict:
    """High-probability bound on the mismatch gap, fully measured.

    LHS: mismatch_empirical - mismatch_true.  RHS: a Hoeffding term driven by
    the support radius plus 4x the measure-integrated Fisher-information gap
    between the true and empirical diffused marginals (exact constants, no
    hidden factor).
    """
    if not (0 < delta < 1):
        raise ConfigError("delta must lie in (0, 1)")
    lhs = combine_linear([
        (1.0, mismatch_empirical(dataset, measure, mc)),
        (-1.0, mismatch_true(spec, measure, mc)),
    ])

    D = spec.support_radius
    n = dataset.n
    exp_weight = float(np.dot(measure.weights, np.exp(-2.0 * measure.times)))
    hoeffding = 4.0 * D * D * math.sqrt(math.log(1.0 / delta) / (2.0 * n)) * exp_weight

    gauss_score = lambda x: -x
    fisher_terms = []
    for k, (t, w) in enumerate(zip(measure.times, measure.weights)):
        true_f = fisher_mc(
            lambda x, _t=float(t): true_diffused_score(spec, _t, x, "lebesgue"),
            gauss_score,
            lambda m, rng, _t=float(t): sample_diffused(spec, _t, m, rng),
            mc.samples_per_atom,
            spawn_seed(mc.seed, "fisher-true", k),
        )
        emp_f = fisher_mc(
            lambda x, _t=float(t): empirical_diffused_score(dataset, _t, x, "lebesgue"),
            gauss_score,
            lambda m, rng, _t=float(t): sample_diffused(dataset, _t, m, rng),
            mc.samples_per_atom,
            spawn_seed(mc.seed, "fisher-emp", k),
        )
        fisher_terms.append((float(w), true_f, emp_f))

    fisher_gap = combine_linear(
        [(4.0 * w, tf) for w, tf, _ in fisher_terms] + [(-4.0 * w, ef) for w, _, ef in fisher_terms]
    )
    rhs_value = hoeffding + fisher_gap.value
    combined_se = math.hypot(lhs.stderr, fisher_gap.stderr)
    return {
        "lhs": lhs.to_dict(),
        "hoeffding_term": hoeffding,
        "fisher_gap_term": fisher_gap.to_dict(),
        "rhs": rhs_value,
        "combined_stderr": combined_se,
        "satisfied_within_3se": bool(lhs.value <= rhs_value + 3.0 * combined_se),
        "delta": delta,
        "support_radius": D,
        "up_to_constant": False,
    }


def bound_constants(d: int, h: float, T: float, support_radius: float) -> tuple[float, float]:
    """(K1^2, K2^2): score-norm constants entering the quantitative gap bound."""
    K1_sq = d / (1.0 - math.exp(-2.0 * h)) + support_radius**2 + d
    K2_sq = support_radius**2 + d * math.log(T / h) + h * d
    return K1_sq, K2_sq


def smoothed_w2_bound_summands(
    d: int, h: float, T: float, support_radius: float, n: int, delta: float,
    W: float, fisher_data: float,
) -> dict:
    """The four summands of the quantitative gap bound, as pure arithmetic."""
    K1_sq, K2_sq = bound_constants(d, h, T, support_radius)
    log_term = math.log(1.0 / delta)
    D = support_radius
    return {
        "concentration": (D * D + K1_sq) * math.sqrt(log_term / (2.0 * n)),
        "discretization": (h / T) * fisher_data,
        "second_order": K1_sq * log_term / n,
        "transport": (W * W + math.sqrt(K2_sq) * math.sqrt(h) * W) / (T * h),
    }


def smoothed_w2_bound_report(
    dataset: Dataset,
    spec: GmmSpec,
    schedule: NoiseSchedule,
    delta: float,
    mc: McConfig,
    w2_samples: int = 1024,
) -> dict:
    """Quantitative rate-style bound on the mismatch gap (hidden constant = 1).

    The empirical term W is the exact W2 distance between same-size samples
    of the true and empirical marginals diffused to time h/2.  Requires a
    constant step size, i.e. a uniform schedule.
    """
    from .transport import w2_exact

    if schedule.kind != "uniform":
        raise ConfigError("the quantitative gap bound assumes a constant step size")
    if not (0 < delta < 1):
        raise ConfigError("delta must lie in (0, 1)")
    d, n = spec.d, dataset.n
    T, h = schedule.horizon, float(schedule.steps[0])
    D = spec.support_radius
    K1_sq, K2_sq = bound_constants(d, h, T, D)

    rng = stream(mc.seed, "w2-bound")
    a = sample_diffused(spec, h / 2.0, w2_samples, rng)
    b = sample_diffused(dataset, h / 2.0, w2_samples, rng)
    W = w2_exact(a, b, size_cap=max(w2_samples, 4096))

    fisher = fisher_mc(
        lambda x: true_diffused_score(spec, 0.0, x, "lebesgue"),
        lambda x: -x,
        lambda m, rng_: sample_diffused(spec, 0.0, m, rng_),
        mc.samples_per_atom,
        spawn_seed(mc.seed, "fisher-data"),
    )
    summands = smoothed_w2_bound_summands(d, h, T, D, n, delta, W, fisher.value)
    return {
        "K1_sq": K1_sq,
        "K2_sq": K2_sq,
        "W": W,
        "fisher_data": fisher.to_dict(),
        "summands": summands,
        "total": float(sum(summands.values())),
        "delta": delta,
        "w2_samples": w2_samples,
        "up_to_constant": True,
    }
