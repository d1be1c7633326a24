"""Acceptance gate: every criterion at its stated tolerance and budget.

Each test prints one `ACCEPTANCE <id> PASS ...` line (visible with -s).
The hyperparameter-grid criterion (12) trains 24 models for 20k steps each
and dominates the runtime; everything else finishes in a few minutes.
"""

import math
import os
import time

import numpy as np
import pytest

import scorelab as sl
from scorelab.losses import smoothed_w2_bound_summands
from scorelab.optimizers import GradStats
from scorelab.rng import stream
from scorelab.runner import report_correlations, run_grid


def announce(cid, ok, detail, budget_s=None, elapsed=None):
    status = "PASS" if ok else "FAIL"
    timing = f" [{elapsed:.1f}s / budget {budget_s:.0f}s]" if budget_s is not None else ""
    print(f"\nACCEPTANCE {cid} {status} {detail}{timing}", flush=True)
    assert ok, f"criterion {cid}: {detail}"
    if budget_s is not None:
        assert elapsed <= budget_s, f"criterion {cid} exceeded budget: {elapsed:.1f}s > {budget_s}s"


def d2_spec():
    return sl.GmmSpec(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[0.5, -0.3], [-0.4, 0.6], [0.1, 0.2]]),
        sigma2=0.05**2,
    )


def test_c01_decomposition_identity():
    t0 = time.time()
    spec = d2_spec()
    ds = sl.sample_gmm(spec, 32, seed=7)
    sched = sl.build_uniform_schedule(2.0, 10)
    lam = sl.lambda_measure(sched)
    arch = sl.MlpArch(input_dim=2, time_scale=2.0)

    random_net = sl.new_net(arch, seed=3)
    cfg = sl.SgldConfig(eta=1e-3, beta=1e6, steps=2000, batch_size=32)
    trained_net = sl.train(random_net, ds, sched, cfg, seed=11).net

    mc = sl.McConfig(samples_per_atom=4096, seed=21)
    details = []
    ok = True
    for name, net in (("random", random_net), ("trained", trained_net)):
        rep = sl.decompose(sl.sampling_score_fn(net), ds, spec, lam, mc)
        r, se, eps = rep.residual.value, rep.residual.stderr, rep.score_error.value
        ok &= abs(r) <= 3 * se
        ok &= abs(r) <= 0.02 * eps
        details.append(f"{name}: |resid|={abs(r):.2e} (3se={3*se:.2e}, 2%eps={0.02*eps:.2e})")
    announce("01 decomposition-identity", ok, "; ".join(details), budget_s=300, elapsed=time.time() - t0)


def test_c02_conditional_score_norm_closed_form():
    t0 = time.time()
    sched = sl.build_uniform_schedule(2.0, 10)
    lam = sl.lambda_measure(sched)
    zero_fn = lambda t, x: np.zeros_like(x)
    mc = sl.McConfig(samples_per_atom=30000, seed=5)
    ok = True
    details = []
    point_mass = sl.Dataset(points=np.zeros((1, 2)))
    sixteen = sl.sample_gmm(d2_spec(), 16, seed=9)
    for name, ds in (("point-mass", point_mass), ("16-point", sixteen)):
        est = sl.empirical_dsm(zero_fn, ds, lam, mc)
        closed = 4.0 * float(np.dot(
            lam.weights,
            np.exp(-2 * lam.times) * (sl.second_moment(ds) + ds.d / (np.exp(2 * lam.times) - 1)),
        ))
        ok &= abs(est.value - closed) <= 3 * est.stderr
        details.append(f"{name}: mc={est.value:.4f} closed={closed:.4f} 3se={3*est.stderr:.4f}")
    announce("02 conditional-score-second-moment", ok, "; ".join(details), budget_s=30, elapsed=time.time() - t0)


def test_c03_mismatch_terms_nonnegative():
    t0 = time.time()
    spec = d2_spec()
    sched = sl.build_uniform_schedule(2.0, 10)
    lam = sl.lambda_measure(sched)
    mc = sl.McConfig(samples_per_atom=4096, seed=6)
    ct = sl.mismatch_true(spec, lam, mc)
    ds = sl.sample_gmm(spec, 24, seed=3)
    chat = sl.mismatch_empirical(ds, lam, mc)
    single = sl.mismatch_empirical(sl.Dataset(points=np.array([[0.4, -0.1]])), lam, mc)
    ok = ct.value >= -3 * ct.stderr and chat.value >= -3 * chat.stderr and single.value == 0.0
    announce(
        "03 mismatch-nonnegativity",
        ok,
        f"true={ct.value:.4f}(se {ct.stderr:.4f}) empirical={chat.value:.4f}(se {chat.stderr:.4f}) single-point={single.value}",
        budget_s=30,
        elapsed=time.time() - t0,
    )


def test_c04_mismatch_gap_bound_holds():
    t0 = time.time()
    spec = d2_spec()
    sched = sl.build_uniform_schedule(2.0, 10)
    lam = sl.lambda_measure(sched)
    ok = True
    margins = []
    for seed in range(5):
        ds = sl.sample_gmm(spec, 128, seed=40 + seed)
        rep = sl.mismatch_gap_bound_report(ds, spec, lam, delta=0.05,
                                           mc=sl.McConfig(samples_per_atom=1500, seed=60 + seed))
        lhs = rep["lhs"]["value"]
        slack = rep["rhs"] + 3 * rep["combined_stderr"] - lhs
        ok &= slack >= 0
        margins.append(f"{slack:.3f}")
    announce("04 mismatch-gap-bound", ok, f"slack per seed: {margins}", budget_s=300, elapsed=time.time() - t0)


def test_c05_score_projection_identity_with_network():
    t0 = time.time()
    spec = d2_spec()
    ds = sl.sample_gmm(spec, 64, seed=2)
    sched = sl.build_uniform_schedule(2.0, 10)
    net0 = sl.new_net(sl.MlpArch(input_dim=2, time_scale=2.0), seed=1)
    net = sl.train(net0, ds, sched, sl.SgldConfig(eta=1e-3, beta=1e8, steps=800, batch_size=64), seed=5).net

    rng = stream(77, "projection-net")
    ok = True
    details = []
    for t in (0.2, 0.8, 1.6):
        M = 40000
        z = sl.sample_diffused(spec, 0.0, M, rng)
        g = rng.standard_normal((M, 2))
        x = sl.forward_sample(z, t, g)
        psi = sl.eps_forward(net, t, x)
        marg = sl.true_diffused_score(spec, t, x, "gamma")
        cond = sl.conditional_score(x, z, t, "gamma")
        diff = (psi * (marg - cond)).sum(axis=1)
        se = diff.std(ddof=1) / math.sqrt(M)
        ok &= abs(diff.mean()) <= 3 * se
        details.append(f"t={t}: {diff.mean():+.2e} (3se {3*se:.2e})")
    announce("05 projection-identity-network", ok, "; ".join(details), budget_s=60, elapsed=time.time() - t0)


def test_c06_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(123)
    worst = 0.0
    ok = True
    for trial in range(5):
        arch = sl.MlpArch(input_dim=3, time_scale=2.0)
        net = sl.new_net(arch, seed=trial)
        net.params.data[:] = 0.35 * rng.standard_normal(len(net.params))
        t = rng.uniform(0.1, 1.9, 6)
        x = rng.standard_normal((6, 3))
        y = rng.standard_normal((6, 3))
        loss, grad = sl.backprop_eps_loss(net, t, x, y)
        step = 1e-6
        # coordinates whose true derivative sits below the roundoff of the
        # difference quotient itself (~eps * |loss| / step) cannot carry a
        # meaningful relative error; guard them with that floor
        atol = 1e-9 + 4 * np.finfo(float).eps * abs(loss) / step
        for i in rng.choice(len(net.params), size=50, replace=False):
            orig = net.params.data[i]
            net.params.data[i] = orig + step
            lp, _ = sl.backprop_eps_loss(net, t, x, y)
            net.params.data[i] = orig - step
            lm, _ = sl.backprop_eps_loss(net, t, x, y)
            net.params.data[i] = orig
            num = (lp - lm) / (2 * step)
            ana = grad.data[i]
            err = abs(num - ana)
            tol = max(atol, 1e-5 * max(abs(num), abs(ana)))
            ok &= err <= tol
            worst = max(worst, err / tol)
    announce("06 gradient-correctness", ok,
             f"max error at {worst:.3f} of tolerance over 250 probes",
             budget_s=60, elapsed=time.time() - t0)


def test_c07_mst_oracle_equivalence():
    import itertools

    t0 = time.time()

    def brute(values):
        K = values.shape[0]
        best = math.inf
        for subset in itertools.combinations(list(itertools.combinations(range(K), 2)), K - 1):
            parent = list(range(K))

            def find(a):
                while parent[a] != a:
                    parent[a] = parent[parent[a]]
                    a = parent[a]
                return a

            cost = sum(values[i, j] for i, j in subset)
            for i, j in subset:
                parent[find(i)] = find(j)
            if len({find(i) for i in range(K)}) == 1:
                best = min(best, cost)
        return best

    rng = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        K = int(rng.integers(2, 7))
        rows = rng.uniform(0, 1, size=(K, 4))
        dist = sl.pseudometric_matrix(
            sl.TrajectoryRecord(rows=rows, k0=0, k1=K - 1, subset_indices=np.arange(4), probe_seed=0)
        )
        ok &= sl.mst_lifetime_sum(dist) == pytest.approx(brute(dist.values), abs=1e-12)
    announce("07 mst-oracle", ok, "dense tree cost equals exhaustive enumeration on 100 instances",
             budget_s=5, elapsed=time.time() - t0)


def test_c08_positive_magnitude_closed_forms():
    t0 = time.time()
    one = sl.DistanceMatrix(values=np.zeros((1, 1)))
    ok = sl.positive_magnitude(one, 5.0) == 1.0
    worst = 0.0
    for r in (0.01, 0.1, 1.0, 8.0, 64.0):
        for rho in (1e-3, 0.1, 1.0, 5.0):
            v = np.array([[0.0, rho], [rho, 0.0]])
            got = sl.positive_magnitude(sl.DistanceMatrix(values=v), r)
            want = 2.0 / (1.0 + math.exp(-r * rho))
            worst = max(worst, abs(got - want))
            ok &= abs(got - want) <= 1e-10
    # duplicates collapse before the solve
    v = np.zeros((3, 3))
    v[:2, 2] = v[2, :2] = 0.7
    dup = sl.positive_magnitude(sl.DistanceMatrix(values=v), 2.0)
    ok &= abs(dup - 2.0 / (1.0 + math.exp(-1.4))) <= 1e-10
    announce("08 positive-magnitude", ok, f"two-point worst abs err {worst:.1e}; dedup invariant",
             budget_s=5, elapsed=time.time() - t0)


def test_c09_w2_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(1)
    ok = True
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 8))
        d = int(rng.integers(1, 4))
        X, Y = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        err = abs(sl.w2_exact(X, Y) - sl.w2_bruteforce(X, Y))
        worst = max(worst, err)
        ok &= err <= 1e-10
    for _ in range(20):
        X, Y, Z = (rng.standard_normal((6, 2)) for _ in range(3))
        ok &= abs(sl.w2_exact(X, Y) - sl.w2_exact(Y, X)) <= 1e-12
        ok &= sl.w2_exact(X, Z) <= sl.w2_exact(X, Y) + sl.w2_exact(Y, Z) + 1e-9
    announce("09 w2-oracle", ok, f"assignment vs permutation brute force, worst err {worst:.1e}",
             budget_s=10, elapsed=time.time() - t0)


def test_c10_oracle_sampler_end_to_end():
    t0 = time.time()
    spec = sl.GmmSpec(weights=np.array([1.0]), means=np.zeros((1, 2)), sigma2=0.25)
    sched = sl.build_uniform_schedule(4.0, 400)
    fn = lambda t, x: 2.0 * sl.true_diffused_score(spec, t, x, "gamma")
    m = 4096
    gen = sl.ei_backward_sample(fn, sched, m, 2, seed=31)
    fresh1 = sl.sample_gmm(spec, m, seed=32).points
    fresh2 = sl.sample_gmm(spec, m, seed=33).points
    w_gen_sq = sl.w2_exact(gen, fresh1) ** 2
    w_base_sq = sl.w2_exact(fresh2, fresh1) ** 2
    ok = w_gen_sq <= 2.0 * w_base_sq
    announce("10 oracle-sampler", ok, f"W2^2 generated={w_gen_sq:.2e} vs 2x baseline={2*w_base_sq:.2e}",
             budget_s=120, elapsed=time.time() - t0)


def test_c11_epsilon_dsm_proportionality():
    t0 = time.time()
    rng = stream(0, "proportionality-acceptance")
    net = sl.new_net(sl.MlpArch(input_dim=2, time_scale=2.0), seed=4)
    net.params.data[:] = 0.3 * np.random.default_rng(5).standard_normal(len(net.params))
    ok = True
    worst = 0.0
    for t in (0.2, 0.7, 1.5):
        alpha = math.exp(-2 * t)
        z = rng.uniform(-1, 1, (64, 2))
        g = rng.standard_normal((64, 2))
        x = sl.forward_sample(z, t, g)
        eps_loss = ((sl.eps_forward(net, t, x) - g) ** 2).sum(1).mean()
        target = -2.0 * g / math.sqrt(1 - alpha)
        dsm_loss = ((sl.score_from_eps(net, t, x) - target) ** 2).sum(1).mean()
        rel = abs(dsm_loss - 4.0 / (1 - alpha) * eps_loss) / dsm_loss
        worst = max(worst, rel)
        ok &= rel < 1e-10
    announce("11 eps-dsm-proportionality", ok, f"worst relative error {worst:.1e}",
             budget_s=10, elapsed=time.time() - t0)


def test_c13_bound_formula_fixtures():
    t0 = time.time()
    ok = True

    # gradient-norm bound, flat and decayed cases
    stats = GradStats(sq_grad_norms=np.array([4.0]), losses=np.zeros(1), etas=np.array([0.1]))
    cfg = sl.SgldConfig(eta=0.1, beta=2.0, steps=1, batch_size=1)
    got = sl.sgld_generalization_bound(stats, cfg, tau=1.0, delta=3.0 / math.e, n=100)
    ok &= abs(got - 0.2 * math.sqrt(1.4)) <= 1e-10

    stats2 = GradStats(sq_grad_norms=np.array([4.0, 1.0]), losses=np.zeros(2), etas=np.array([0.1, 0.1]))
    cfg2 = sl.SgldConfig(eta=0.1, beta=2.0, steps=2, batch_size=1, a=0.5, sigma0=1.0)
    want2 = (2.0 / math.sqrt(400.0)) * math.sqrt(
        (2.0 / 2.0) * (0.1 * math.exp(-0.25 * 0.2) * 4.0 + 0.1 * math.exp(-0.25 * 0.1) * 1.0)
        + math.log(3.0 / 0.1)
    )
    ok &= abs(sl.sgld_generalization_bound(stats2, cfg2, tau=1.0, delta=0.1, n=400) - want2) <= 1e-10

    # lifetime-sum bound
    p = sl.BoundParams(loss_bound=2.0, delta=0.1, mutual_info=0.3)
    want = 2.0 * math.sqrt((math.log(1 + (4 * math.sqrt(50) / 2.0) * 1.7) + 1 + 0.3 + math.log(10.0)) / 50)
    ok &= abs(sl.trajectory_bound_rhs(1.7, p, 50, "lifetime_sum") - want) <= 1e-10

    # magnitude bound
    pm = sl.BoundParams(loss_bound=1.0, delta=1.0 / math.e, r=1.0)
    ok &= abs(sl.trajectory_bound_rhs(1.0, pm, 100, "magnitude") - 0.31) <= 1e-10
    pm2 = sl.BoundParams(loss_bound=3.0, delta=0.2, mutual_info=0.5, r=4.0)
    want_m = (2.0 / 4.0) * math.log(2.5) + 4.0 * 9.0 / 64 + 3 * 3.0 * math.sqrt((0.5 + math.log(5.0)) / 64)
    ok &= abs(sl.trajectory_bound_rhs(2.5, pm2, 64, "magnitude") - want_m) <= 1e-10

    # KL guarantee terms
    rep = sl.kl_bound_terms(0.1, 1.0, 5.0, T=2.0, h=0.2)
    ok &= abs(rep["init_term"] - math.exp(-4.0)) <= 1e-10
    ok &= abs(rep["score_term"] - 0.2) <= 1e-10
    ok &= abs(rep["discretization_term"] - 1.0) <= 1e-10

    # quantitative gap bound summands
    s = smoothed_w2_bound_summands(d=4, h=0.2, T=2.0, support_radius=1.3, n=1024,
                                   delta=0.05, W=0.07, fisher_data=6.0)
    K1_sq = 4 / (1 - math.exp(-0.4)) + 1.69 + 4
    K2_sq = 1.69 + 4 * math.log(10.0) + 0.8
    log20 = math.log(20.0)
    ok &= abs(s["concentration"] - (1.69 + K1_sq) * math.sqrt(log20 / 2048)) <= 1e-10
    ok &= abs(s["discretization"] - 0.1 * 6.0) <= 1e-10
    ok &= abs(s["second_order"] - K1_sq * log20 / 1024) <= 1e-10
    ok &= abs(s["transport"] - (0.0049 + math.sqrt(K2_sq) * math.sqrt(0.2) * 0.07) / 0.4) <= 1e-10

    announce("13 bound-formula-fixtures", ok, "all hand-computed fixtures match to 1e-10",
             budget_s=1, elapsed=time.time() - t0)


def test_c14_determinism():
    import tempfile
    from pathlib import Path

    t0 = time.time()
    grid = {
        "base": {
            "data": {"n": 32},
            "schedule": {"kind": "uniform", "T": 2.0, "N": 6},
            "optimizer": {"kind": "sgld", "eta": 1e-3, "beta": 1e8, "batch_size": 32, "steps": 120},
            "trajectory": {"enabled": True, "steps": 10, "subset": 16},
            "sample_eval": {"enabled": True, "m": 24},
            "inference_schedule": {"kind": "uniform", "T": 2.0, "N": 5},
            "eval_draws": 4,
        },
        "axes": {"optimizer.eta": [1e-3, 2e-3], "seed": [0]},
    }
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        run_grid(grid, tmp / "a")
        run_grid(grid, tmp / "b")
        agg_equal = (tmp / "a" / "aggregate.csv").read_bytes() == (tmp / "b" / "aggregate.csv").read_bytes()
        cells = sorted(p.name for p in (tmp / "a" / "cells").iterdir())
        cell_equal = all(
            (tmp / "a" / "cells" / c / "gradstats.csv").read_bytes()
            == (tmp / "b" / "cells" / c / "gradstats.csv").read_bytes()
            for c in cells
        )
    ok = agg_equal and cell_equal
    announce("14 determinism", ok, "aggregate and per-cell metric CSVs byte-identical across reruns",
             budget_s=120, elapsed=time.time() - t0)


def test_smoke_training_descends():
    # frozen smoke threshold: full-batch SGLD on n=512 reaches 0.8 * d
    t0 = time.time()
    spec = sl.reference_mixture(d=4, seed=0)
    ds = sl.sample_gmm(spec, 512, seed=8)
    sched = sl.build_cosine_schedule(200)
    net = sl.new_net(sl.MlpArch(input_dim=4, time_scale=sched.horizon), seed=1)
    cfg = sl.SgldConfig(eta=1e-3, beta=1e6, steps=20000, batch_size=512)
    res = sl.train(net, ds, sched, cfg, seed=42)
    start = float(res.stats.losses[0])  # zero-init net predicts 0, so E|G|^2 = d
    end = float(res.stats.losses[-500:].mean())
    ok = abs(start - 4.0) < 0.5 and end < 0.8 * 4.0
    announce("S  training-smoke", ok, f"loss {start:.3f} -> {end:.3f} (threshold {0.8 * 4.0})",
             budget_s=600, elapsed=time.time() - t0)


def test_c12_scaled_grid_correlation():
    import tempfile
    from pathlib import Path

    t0 = time.time()
    workers = int(os.environ.get("SCORELAB_ACCEPT_WORKERS", min(8, os.cpu_count() or 1)))
    grid = {
        "base": {
            "data": {"spec": "reference", "d": 4, "spec_seed": 0, "n": 512, "seed": 1},
            "schedule": {"kind": "cosine", "N": 200},
            "optimizer": {"kind": "sgld", "eta": 5e-4, "beta": 1e4, "a": 0.0,
                          "batch_size": 100000, "steps": 20000},
            "trajectory": {"enabled": False},
            "sample_eval": {"enabled": False},
            "eval_draws": 10,
        },
        "axes": {
            "optimizer.beta": [1e4, 1e10],
            "optimizer.eta": [5e-4, 2e-3],
            "data.n": [512, 2048],
            "seed": [0, 1, 2],
        },
    }
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rows = run_grid(grid, tmp, workers=workers)
        ok = all(r["status"] == "ok" for r in rows) and len(rows) == 24
        report = report_correlations(tmp / "aggregate.csv", tmp / "report", group_by="beta")

    spearman = {}
    for gval, entry in report["groups"].items():
        spearman[float(gval)] = entry["complexities"]["proxy_b"]["spearman"]
    ok &= set(spearman) == {1e4, 1e10}
    ok &= all(v is not None for v in spearman.values())
    # expected sign at high inverse temperature; inherently stochastic, so a
    # failure here means re-examining seeds rather than the pipeline
    high_beta_positive = spearman.get(1e10, -1.0) > 0
    detail = (f"spearman(B, gap): beta=1e4 -> {spearman.get(1e4):.3f}, "
              f"beta=1e10 -> {spearman.get(1e10):.3f} (stochastic sign check)")
    announce("12 grid-correlation", ok and high_beta_positive, detail,
             budget_s=4 * 3600, elapsed=time.time() - t0)
