"""Run orchestration: configs, manifests, single runs, grids and reports.

A run config is a plain JSON-able dict; the canonical JSON of the resolved
config is hashed into the manifest, and every artifact the run writes is
hashed there too, so a manifest plus the inputs reproduces the run exactly.
Grid execution walks the cross product of axis overrides; each cell runs in
isolation (optionally in a worker pool) and failures are recorded without
stopping sibling cells.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, UndefinedCorrelation
from .gmm import Dataset, GmmSpec, reference_mixture, sample_gmm
from .losses import McConfig, epsilon_loss
from .mlp import MlpArch, new_net, sampling_score_fn
from .optimizers import (
    AdamConfig,
    SgldConfig,
    batch_inverse_temperature,
    grad_norm_proxy,
    last_window_avg,
    sgld_generalization_bound,
    train,
)
from .rng import spawn_seed
from .schedules import NoiseSchedule, build_cosine_schedule, build_uniform_schedule, ei_backward_sample, uniform_time_measure
from .serialization import (
    atomic_write_json,
    atomic_write_text,
    canonical_json,
    read_json,
    save_checkpoint,
    save_cloud,
    save_dataset,
    save_trajectory,
    sha256_bytes,
    sha256_file,
)
from .topology import magnitude_weighting, mst_lifetime_sum, pseudometric_matrix, record_trajectory, standard_scales
from .transport import correlations, w2_exact

OUT_ROOT_ENV = "SCORELAB_OUT"

DEFAULT_RUN_CONFIG = {
    "data": {"spec": "reference", "d": 4, "spec_seed": 0, "n": 512, "seed": 1},
    "schedule": {"kind": "cosine", "N": 200, "s": 0.008, "ratio_cap": 0.999},
    "inference_schedule": {"kind": "cosine", "N": 100, "s": 0.008, "ratio_cap": 0.999},
    "arch": {"n_blocks": 3, "hidden": 32, "time_embed_dim": 32},
    "optimizer": {"kind": "sgld", "eta": 1e-3, "beta": 1e6, "a": 0.0, "batch_size": 100000, "steps": 20000},
    "seed": 0,
    "eval_draws": 10,
    "trajectory": {"enabled": True, "steps": 400, "subset": 3000},
    "sample_eval": {"enabled": True, "m": 1024},
}


def fmt(x) -> str:
    """Canonical scalar formatting for CSV cells (round-trip repr)."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def merged_config(overrides: dict | None = None, base: dict | None = None) -> dict:
    """Deep-merge overrides into the default run config."""
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG if base is None else base)

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v

    if overrides:
        merge(cfg, overrides)
    return cfg


def set_by_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def build_schedule(sc: dict) -> NoiseSchedule:
    kind = sc.get("kind", "cosine")
    if kind == "uniform":
        return build_uniform_schedule(float(sc["T"]), int(sc["N"]))
    if kind == "cosine":
        return build_cosine_schedule(int(sc["N"]), float(sc.get("s", 0.008)), float(sc.get("ratio_cap", 0.999)))
    raise ConfigError(f"unknown schedule kind {kind!r}")


def resolve_spec(data_cfg: dict) -> GmmSpec:
    spec = data_cfg.get("spec", "reference")
    if spec == "reference":
        return reference_mixture(d=int(data_cfg.get("d", 4)), seed=int(data_cfg.get("spec_seed", 0)))
    if isinstance(spec, dict):
        return GmmSpec.from_dict(spec)
    if isinstance(spec, str):
        return GmmSpec.from_dict(read_json(spec))
    raise ConfigError("data.spec must be 'reference', a dict, or a JSON path")


def build_optimizer(opt: dict):
    kind = opt.get("kind", "sgld")
    if kind == "sgld":
        return SgldConfig(
            eta=float(opt["eta"]),
            beta=float(opt["beta"]),
            steps=int(opt["steps"]),
            batch_size=int(opt["batch_size"]),
            a=float(opt.get("a", 0.0)),
            sigma0=float(opt.get("sigma0", 1.0)),
            clip_norm=opt.get("clip_norm"),
        )
    if kind == "adam":
        return AdamConfig(
            lr=float(opt["lr"]),
            steps=int(opt["steps"]),
            batch_size=int(opt["batch_size"]),
            clip_norm=opt.get("clip_norm"),
        )
    raise ConfigError(f"unknown optimizer kind {kind!r}")


class Manifest:
    """Collects everything needed to reproduce and verify a run."""

    def __init__(self, config: dict, out_dir: Path):
        self.data = {
            "config": config,
            "config_hash": sha256_bytes(canonical_json(config).encode()),
            "version": __version__,
            "inputs": {},
            "artifacts": {},
            "timing": {},
        }
        self.out_dir = out_dir
        self._t0 = time.time()

    def add_input(self, name: str, path: str | Path) -> None:
        self.data["inputs"][name] = {"path": str(path), "sha256": sha256_file(path)}

    def add_artifact(self, name: str, path: str | Path) -> None:
        self.data["artifacts"][name] = {"path": str(path), "sha256": sha256_file(path)}

    def finish(self) -> dict:
        self.data["timing"]["wall_s"] = time.time() - self._t0
        atomic_write_json(self.out_dir / "manifest.json", self.data)
        return self.data


def gen_data(spec: GmmSpec, n: int, seed: int, out_base: Path) -> Dataset:
    ds = sample_gmm(spec, n, seed)
    save_dataset(out_base, ds)
    return ds


def gradstats_csv(stats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "sq_grad_norm", "train_loss"])
    for k in range(len(stats)):
        w.writerow([k, fmt(float(stats.sq_grad_norms[k])), fmt(float(stats.losses[k]))])
    return buf.getvalue()


def run_cell(config: dict, out_dir: str | Path) -> dict:
    """One full run: data, training, evaluation, optional trajectory/sampling.

    Returns the flat metrics row; artifacts and a manifest land in out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(config, out)

    spec = resolve_spec(config["data"])
    n = int(config["data"]["n"])
    seed = int(config["seed"])
    data_seed = int(config["data"]["seed"])

    train_ds = gen_data(spec, n, spawn_seed(data_seed, "train-data", seed), out / "train_data")
    test_ds = gen_data(spec, n, spawn_seed(data_seed, "test-data", seed), out / "test_data")
    manifest.add_input("train_data", out / "train_data.bin")
    manifest.add_input("test_data", out / "test_data.bin")

    schedule = build_schedule(config["schedule"])
    arch = MlpArch(
        input_dim=spec.d,
        n_blocks=int(config["arch"].get("n_blocks", 3)),
        hidden=int(config["arch"].get("hidden", 32)),
        time_embed_dim=int(config["arch"].get("time_embed_dim", 32)),
        time_scale=schedule.horizon,
    )
    opt = build_optimizer(config["optimizer"])
    net0 = new_net(arch, seed=spawn_seed(seed, "net-init"))
    result = train(net0, train_ds, schedule, opt, seed=spawn_seed(seed, "train-loop"))
    net = result.net
    stats = result.stats

    save_checkpoint(out / "checkpoint.ckpt", net)
    atomic_write_text(out / "gradstats.csv", gradstats_csv(stats))
    manifest.add_artifact("checkpoint", out / "checkpoint.ckpt")
    manifest.add_artifact("gradstats", out / "gradstats.csv")

    nu = uniform_time_measure(schedule)
    draws = int(config.get("eval_draws", 10))
    mc_train = McConfig(samples_per_atom=draws, seed=spawn_seed(seed, "eval-train"))
    mc_test = McConfig(samples_per_atom=draws, seed=spawn_seed(seed, "eval-test"))
    train_loss = epsilon_loss(net, train_ds, nu, mc_train)
    test_loss = epsilon_loss(net, test_ds, nu, mc_test)
    gap = test_loss.value - train_loss.value

    opt_cfg = config["optimizer"]
    if opt_cfg["kind"] == "sgld":
        eta = float(opt_cfg["eta"])
        beta = float(opt_cfg["beta"])
        avg_used = stats.avg_sq_grad()
    else:
        eta = float(opt_cfg["lr"])
        beta = batch_inverse_temperature(min(int(opt_cfg["batch_size"]), n), eta)
        avg_used = last_window_avg(stats, 200)

    row = {
        "optimizer": opt_cfg["kind"],
        "eta": eta,
        "beta": beta,
        "n": n,
        "seed": seed,
        "steps": int(opt_cfg["steps"]),
        "train_loss": train_loss.value,
        "test_loss": test_loss.value,
        "gen_gap": gap,
        "avg_sq_grad": stats.avg_sq_grad(),
        "last200_sq_grad": last_window_avg(stats, 200),
        "proxy_b": grad_norm_proxy(n, eta, beta, avg_used),
        "proxy_b_sqrt_n": grad_norm_proxy(n, eta, beta, avg_used) * math.sqrt(n),
    }
    if isinstance(opt, SgldConfig) and len(stats) > 0:
        row["sgld_bound"] = sgld_generalization_bound(stats, opt, tau=1.0, delta=0.05, n=n)
    else:
        row["sgld_bound"] = float("nan")

    traj_cfg = config.get("trajectory", {})
    if traj_cfg.get("enabled", False):
        t_steps = int(traj_cfg.get("steps", 400))
        t_opt = build_optimizer({**opt_cfg, "steps": t_steps})
        t_res = record_trajectory(
            net, train_ds, schedule, t_opt,
            seed=spawn_seed(seed, "trajectory"),
            subset_size=int(traj_cfg.get("subset", 3000)),
        )
        save_trajectory(out / "trajectory", t_res.trajectory)
        manifest.add_artifact("trajectory", out / "trajectory.bin")
        dist = pseudometric_matrix(t_res.trajectory)
        row["e1"] = mst_lifetime_sum(dist)
        for name, r in standard_scales(n).items():
            beta_w, _ = magnitude_weighting(dist, r)
            row[f"pmag_{name}"] = float(np.clip(beta_w, 0.0, None).sum())
    else:
        row["e1"] = float("nan")
        row["pmag_sqrt_n"] = float("nan")
        row["pmag_small"] = float("nan")

    samp_cfg = config.get("sample_eval", {})
    if samp_cfg.get("enabled", False):
        m = int(samp_cfg.get("m", 1024))
        inf_schedule = build_schedule(config.get("inference_schedule", config["schedule"]))
        cloud = ei_backward_sample(
            sampling_score_fn(net), inf_schedule, m, spec.d, seed=spawn_seed(seed, "sampling")
        )
        save_cloud(out / "samples", cloud, {"seed": seed})
        manifest.add_artifact("samples", out / "samples.bin")
        fresh = sample_gmm(spec, m, spawn_seed(seed, "w2-reference")).points
        row["w2"] = w2_exact(cloud, fresh, size_cap=max(m, 4096))
    else:
        row["w2"] = float("nan")

    row["status"] = "ok"
    manifest.data["metrics"] = row
    manifest.finish()
    return row


ROW_COLUMNS = [
    "cell", "optimizer", "eta", "beta", "n", "seed", "steps",
    "train_loss", "test_loss", "gen_gap",
    "avg_sq_grad", "last200_sq_grad", "proxy_b", "proxy_b_sqrt_n", "sgld_bound",
    "e1", "pmag_sqrt_n", "pmag_small", "w2", "status", "error",
]


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in ROW_COLUMNS])
    return buf.getvalue()


def _cell_name(values: dict) -> str:
    return "__".join(f"{k.split('.')[-1]}={v:g}" if isinstance(v, float) else f"{k.split('.')[-1]}={v}" for k, v in values.items())


def _run_cell_entry(args):
    cell_name, config, cell_dir = args
    try:
        row = run_cell(config, cell_dir)
        row["cell"] = cell_name
        row["error"] = ""
        return row
    except Exception as exc:  # record the failure, keep siblings running
        return {"cell": cell_name, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


_BLAS_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _run_parallel(tasks, workers: int) -> list[dict]:
    """Map cells over spawned workers with single-threaded BLAS.

    One process per core with one BLAS thread each avoids the heavy
    oversubscription penalty of threaded BLAS spinning across workers; the
    spawn context makes the fresh interpreters pick the setting up at
    library load.
    """
    saved = {v: os.environ.get(v) for v in _BLAS_ENV}
    os.environ.update({v: "1" for v in _BLAS_ENV})
    try:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_run_cell_entry, tasks))
    finally:
        for v, old in saved.items():
            if old is None:
                os.environ.pop(v, None)
            else:
                os.environ[v] = old


def run_grid(grid_config: dict, out_dir: str | Path, workers: int = 1) -> list[dict]:
    """Cross product of axis overrides; one run per cell; aggregate CSV.

    grid_config: {"base": run-config overrides, "axes": {dotted.path: [values]}}
    Rows come back in deterministic (sorted axis) order regardless of worker
    scheduling.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    axes = grid_config.get("axes", {})
    if any(len(v) == 0 for v in axes.values()):
        raise ConfigError("grid axes must be nonempty")
    base = merged_config(grid_config.get("base", {}))

    paths = sorted(axes.keys())
    tasks = []
    for combo in itertools.product(*(axes[p] for p in paths)):
        values = dict(zip(paths, combo))
        config = copy.deepcopy(base)
        for p, v in values.items():
            set_by_path(config, p, v)
        name = _cell_name(values)
        tasks.append((name, config, str(out / "cells" / name)))

    if workers > 1:
        rows = _run_parallel(tasks, workers)
    else:
        rows = [_run_cell_entry(t) for t in tasks]

    atomic_write_text(out / "aggregate.csv", rows_to_csv(rows))
    atomic_write_json(out / "grid_manifest.json", {
        "grid_config": grid_config,
        "config_hash": sha256_bytes(canonical_json(grid_config).encode()),
        "cells": [t[0] for t in tasks],
        "version": __version__,
    })
    return rows


COMPLEXITY_COLUMNS = ["proxy_b", "avg_sq_grad", "last200_sq_grad", "sgld_bound", "e1", "pmag_sqrt_n", "pmag_small"]


def report_correlations(csv_path: str | Path, out_dir: str | Path, group_by: str = "beta") -> dict:
    """Per-group Pearson/Spearman of each complexity column against the gap.

    Also emits per-(group, complexity) scatter data as CSV files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigError("empty aggregate CSV")
    required = {"gen_gap", group_by}
    if not required.issubset(rows[0].keys()):
        raise ConfigError(f"aggregate CSV lacks required columns {sorted(required)}")

    ok_rows = [r for r in rows if r.get("status") == "ok"]
    groups = sorted({r[group_by] for r in ok_rows})
    result: dict = {"group_by": group_by, "groups": {}}
    for gval in groups:
        sub = [r for r in ok_rows if r[group_by] == gval]
        gaps = np.array([float(r["gen_gap"]) for r in sub])
        entry = {"count": len(sub), "complexities": {}}
        for col in COMPLEXITY_COLUMNS:
            if col not in sub[0]:
                continue
            vals = np.array([float(r[col]) for r in sub])
            mask = np.isfinite(vals) & np.isfinite(gaps)
            if mask.sum() < 3:
                entry["complexities"][col] = {"pearson": None, "spearman": None, "count": int(mask.sum())}
                continue
            try:
                corr = correlations(vals[mask], gaps[mask])
            except UndefinedCorrelation:
                corr = {"pearson": None, "spearman": None}
            entry["complexities"][col] = {**corr, "count": int(mask.sum())}
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["x", "y", "color"])
            for r in sub:
                if np.isfinite(float(r[col])) and np.isfinite(float(r["gen_gap"])):
                    w.writerow([fmt(float(r[col])), fmt(float(r["gen_gap"])), r.get("eta", "")])
            atomic_write_text(out / f"scatter_{group_by}={gval}_{col}.csv", buf.getvalue())
        result["groups"][gval] = entry
    atomic_write_json(out / "correlations.json", result)
    return result
