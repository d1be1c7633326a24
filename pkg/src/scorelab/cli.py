"""Command-line interface.

Subcommands: gen-data, train, sample, decompose, topology, bounds, grid,
report.  Exit codes: 0 success, 2 configuration error, 3 numerical failure.
The default output root is the SCORELAB_OUT environment variable (or ./runs).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalFailure
from .gmm import GmmSpec, reference_mixture, sample_gmm
from .losses import McConfig, decompose, kl_bound_terms
from .mlp import sampling_score_fn
from .optimizers import GradStats, SgldConfig, sgld_generalization_bound
from .runner import (
    build_schedule,
    default_out_root,
    merged_config,
    report_correlations,
    resolve_spec,
    run_cell,
    run_grid,
)
from .schedules import ei_backward_sample, lambda_measure
from .serialization import (
    atomic_write_json,
    load_checkpoint,
    load_dataset,
    load_trajectory,
    read_json,
    save_cloud,
    save_dataset,
)
from .topology import BoundParams, topology_report, trajectory_bound_rhs


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else default_out_root()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else int(args.seed)


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError("need n >= 1 samples")
    if args.spec == "reference":
        spec = reference_mixture(d=args.d, seed=args.spec_seed)
    else:
        spec = GmmSpec.from_dict(read_json(args.spec))
    out = _out_dir(args)
    ds = sample_gmm(spec, args.n, _seed(args))
    save_dataset(out / "data", ds)
    atomic_write_json(out / "spec.json", spec.to_dict())
    print(f"wrote {out / 'data.bin'} ({ds.n} x {ds.d})")
    return 0


def cmd_train(args) -> int:
    config = merged_config(read_json(args.config))
    if args.seed is not None:
        config["seed"] = args.seed
    out = _out_dir(args)
    row = run_cell(config, out)
    print(f"train_loss={row['train_loss']:.6g} test_loss={row['test_loss']:.6g} gen_gap={row['gen_gap']:.6g}")
    return 0


def cmd_sample(args) -> int:
    net = load_checkpoint(args.checkpoint)
    if args.kind == "uniform" and args.horizon is None:
        raise ConfigError("uniform sampling schedules need --horizon")
    schedule = build_schedule({"kind": args.kind, "N": args.n_steps, "T": args.horizon})
    cloud = ei_backward_sample(sampling_score_fn(net), schedule, args.m, net.arch.input_dim, seed=_seed(args))
    out = _out_dir(args)
    save_cloud(out / "samples", cloud, {"seed": _seed(args)})
    print(f"wrote {out / 'samples.bin'} ({args.m} x {net.arch.input_dim})")
    return 0


def cmd_decompose(args) -> int:
    net = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    spec = resolve_spec({"spec": args.spec})
    from .serialization import load_schedule

    schedule = load_schedule(args.schedule)
    measure = lambda_measure(schedule)
    mc = McConfig(samples_per_atom=args.mc_budget, seed=_seed(args))
    report = decompose(sampling_score_fn(net), dataset, spec, measure, mc)
    out = _out_dir(args)
    payload = report.to_dict()
    payload["mc"] = {"samples_per_atom": args.mc_budget, "seed": _seed(args),
                     "common_random_numbers": True}
    atomic_write_json(out / "decomposition.json", payload)
    print(f"score_error={report.score_error.value:.6g} residual={report.residual.value:.6g}"
          f" (+- {report.residual.stderr:.3g})")
    return 0


def cmd_topology(args) -> int:
    record = load_trajectory(args.trajectory)
    params = BoundParams(loss_bound=args.loss_bound, delta=args.delta, mutual_info=args.mutual_info, L=args.L)
    scales = None
    if args.scales:
        scales = {}
        for part in args.scales.split(","):
            name, _, val = part.partition("=")
            scales[name] = float(val) if val else float(name)
    report = topology_report(record, n=args.n, params=params, scales=scales, seed=_seed(args))
    out = _out_dir(args)
    atomic_write_json(out / "topology.json", report)
    print(f"E1={report['E1']:.6g} PMag={report['PMag']}")
    return 0


def cmd_bounds(args) -> int:
    """Evaluate bound right-hand sides from a JSON parameter file."""
    params = read_json(args.input)
    kind = params.get("kind")
    if kind == "kl":
        result = kl_bound_terms(params["eps_s"], params["kl_mu_gamma"], params["fisher_mu_gamma"],
                                params["T"], params["h"])
    elif kind == "sgld":
        stats = GradStats(
            sq_grad_norms=np.asarray(params["sq_grad_norms"], dtype=np.float64),
            losses=np.zeros(len(params["sq_grad_norms"])),
            etas=np.full(len(params["sq_grad_norms"]), float(params["eta"])),
        )
        cfg = SgldConfig(eta=float(params["eta"]), beta=float(params["beta"]),
                         steps=len(params["sq_grad_norms"]), batch_size=int(params.get("batch_size", 1)),
                         a=float(params.get("a", 0.0)))
        result = {"bound": sgld_generalization_bound(stats, cfg, params["tau"], params["delta"], params["n"]),
                  "up_to_constant": True}
    elif kind in ("lifetime_sum", "magnitude"):
        bp = BoundParams(loss_bound=params["loss_bound"], delta=params["delta"],
                         mutual_info=params.get("mutual_info", 0.0), r=params.get("r", 1.0),
                         L=params.get("L", 1.0))
        result = {"bound": trajectory_bound_rhs(params["complexity"], bp, params["n"], kind),
                  "up_to_constant": True}
    else:
        raise ConfigError(f"unknown bound kind {kind!r}")
    out = _out_dir(args)
    atomic_write_json(out / "bounds.json", result)
    print(result)
    return 0


def cmd_grid(args) -> int:
    grid_config = read_json(args.config)
    workers = args.workers if args.workers is not None else (args.threads or 1)
    rows = run_grid(grid_config, _out_dir(args), workers=workers)
    failed = [r for r in rows if r.get("status") != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok")
    for r in failed:
        print(f"  failed {r['cell']}: {r['error']}")
    return 0


def cmd_report(args) -> int:
    result = report_correlations(args.csv, _out_dir(args), group_by=args.group_by)
    for gval, entry in result["groups"].items():
        line = ", ".join(
            f"{col}: s={c['spearman']:.3f}" for col, c in entry["complexities"].items()
            if c.get("spearman") is not None
        )
        print(f"{result['group_by']}={gval} (count {entry['count']}): {line}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory (default: $SCORELAB_OUT or ./runs)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="worker-pool size for commands that parallelize")

    g = sub.add_parser("gen-data", parents=[common], help="sample a mixture dataset to disk")
    g.add_argument("--spec", default="reference", help="'reference' or a spec JSON path")
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--spec-seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="run one training cell from a config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw from a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--kind", default="cosine", choices=["cosine", "uniform"])
    s.add_argument("--n-steps", type=int, default=100)
    s.add_argument("--horizon", type=float, default=None, help="horizon T (uniform schedules only)")
    s.add_argument("--m", type=int, required=True)
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("decompose", parents=[common], help="evaluate the score-error decomposition")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="dataset base path (no extension)")
    d.add_argument("--spec", default="reference")
    d.add_argument("--schedule", required=True, help="schedule JSON path")
    d.add_argument("--mc-budget", type=int, default=4096)
    d.set_defaults(func=cmd_decompose)

    tp = sub.add_parser("topology", parents=[common], help="trajectory complexity report")
    tp.add_argument("--trajectory", required=True, help="trajectory base path (no extension)")
    tp.add_argument("--n", type=int, required=True, help="dataset size for scales and bounds")
    tp.add_argument("--loss-bound", type=float, default=1.0)
    tp.add_argument("--delta", type=float, default=0.05)
    tp.add_argument("--mutual-info", type=float, default=0.0)
    tp.add_argument("--L", type=float, default=1.0)
    tp.add_argument("--scales", default=None, help="comma list name=value (default sqrt_n and 1e-2)")
    tp.set_defaults(func=cmd_topology)

    b = sub.add_parser("bounds", parents=[common], help="evaluate a bound RHS from JSON parameters")
    b.add_argument("--input", required=True)
    b.set_defaults(func=cmd_bounds)

    gr = sub.add_parser("grid", parents=[common], help="run a hyperparameter grid")
    gr.add_argument("--config", required=True)
    gr.add_argument("--workers", type=int, default=None, help="worker-pool size (falls back to --threads)")
    gr.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", parents=[common], help="correlation summary from an aggregate CSV")
    r.add_argument("--csv", required=True)
    r.add_argument("--group-by", default="beta")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
