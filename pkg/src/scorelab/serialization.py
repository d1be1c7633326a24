"""File formats: sample clouds, datasets, checkpoints, schedules, trajectories.

Clouds and other float payloads are little-endian float64, row-major, with a
JSON sidecar carrying shapes and provenance.  Checkpoints are a single file:
one JSON header line followed by the raw flat parameter body.  All writes go
through write-temp-then-rename so partially written artifacts never appear
under their final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .gmm import Dataset
from .mlp import MlpArch, ParamVector, ScoreNet, layout_for
from .schedules import NoiseSchedule
from .trajectory import TrajectoryRecord

_F64LE = np.dtype("<f8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | Path, obj, indent: int = 2) -> None:
    atomic_write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# -- sample clouds ----------------------------------------------------------


def save_cloud(base: str | Path, points: np.ndarray, meta: dict | None = None) -> dict:
    """Write {base}.bin + {base}.json; returns the sidecar dict."""
    base = Path(base)
    pts = np.ascontiguousarray(points, dtype=_F64LE)
    if pts.ndim != 2:
        raise ValueError("cloud must be an (m, d) matrix")
    atomic_write_bytes(base.with_suffix(".bin"), pts.tobytes(order="C"))
    sidecar = {"m": int(pts.shape[0]), "d": int(pts.shape[1]), **(meta or {})}
    atomic_write_json(base.with_suffix(".json"), sidecar)
    return sidecar


def load_cloud(base: str | Path) -> tuple[np.ndarray, dict]:
    base = Path(base)
    meta = read_json(base.with_suffix(".json"))
    raw = np.fromfile(base.with_suffix(".bin"), dtype=_F64LE)
    pts = raw.reshape(meta["m"], meta["d"]).astype(np.float64)
    return pts, meta


def save_dataset(base: str | Path, dataset: Dataset) -> dict:
    return save_cloud(base, dataset.points, {"provenance": dataset.provenance})


def load_dataset(base: str | Path) -> Dataset:
    pts, meta = load_cloud(base)
    return Dataset(points=pts, provenance=meta.get("provenance", {}))


# -- schedules --------------------------------------------------------------


def save_schedule(path: str | Path, schedule: NoiseSchedule) -> None:
    atomic_write_json(path, schedule.to_dict())


def load_schedule(path: str | Path) -> NoiseSchedule:
    return NoiseSchedule.from_dict(read_json(path))


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, net: ScoreNet) -> None:
    header = {
        "arch": net.arch.to_dict(),
        "seed": net.meta.get("seed"),
        "step": net.meta.get("step", 0),
    }
    body = np.ascontiguousarray(net.params.data, dtype=_F64LE).tobytes(order="C")
    atomic_write_bytes(path, canonical_json(header).encode("utf-8") + b"\n" + body)


def load_checkpoint(path: str | Path) -> ScoreNet:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    arch = MlpArch.from_dict(header["arch"])
    flat = np.frombuffer(blob[nl + 1 :], dtype=_F64LE).astype(np.float64)
    params = ParamVector(flat, layout_for(arch))
    return ScoreNet(arch=arch, params=params, meta={"seed": header.get("seed"), "step": header.get("step", 0)})


# -- trajectory records -----------------------------------------------------


def save_trajectory(base: str | Path, record: TrajectoryRecord) -> None:
    base = Path(base)
    rows = np.ascontiguousarray(record.rows, dtype=_F64LE)
    atomic_write_bytes(base.with_suffix(".bin"), rows.tobytes(order="C"))
    sidecar = {
        "k0": record.k0,
        "k1": record.k1,
        "n_sub": int(rows.shape[1]),
        "subset_indices": [int(i) for i in record.subset_indices],
        "probe_seed": record.probe_seed,
        "grad_norms": None if record.grad_norms is None else [float(v) for v in record.grad_norms],
        "meta": record.meta,
    }
    atomic_write_json(base.with_suffix(".json"), sidecar)


def load_trajectory(base: str | Path) -> TrajectoryRecord:
    base = Path(base)
    meta = read_json(base.with_suffix(".json"))
    raw = np.fromfile(base.with_suffix(".bin"), dtype=_F64LE)
    rows = raw.reshape(-1, meta["n_sub"]).astype(np.float64)
    gn = meta.get("grad_norms")
    return TrajectoryRecord(
        rows=rows,
        k0=int(meta["k0"]),
        k1=int(meta["k1"]),
        subset_indices=np.asarray(meta["subset_indices"], dtype=np.int64),
        probe_seed=int(meta["probe_seed"]),
        grad_norms=None if gn is None else np.asarray(gn, dtype=np.float64),
        meta=meta.get("meta", {}),
    )
