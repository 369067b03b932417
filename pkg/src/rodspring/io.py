"""Dataset persistence: trajectory and control CSVs plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import SystemConfig
from .params import EngineParams
from .sim import Dataset

STATE_HEADER = "traj,t,rod,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz"
CONTROL_HEADER = "traj,step,rod,fux,fuy,fuz,rux,ruy,ruz"


def _table(index_cols, blocks):
    return np.concatenate([np.stack(index_cols, axis=-1)] + blocks, axis=-1).reshape(-1, 3 + sum(b.shape[-1] for b in blocks))


def write_trajectories_csv(path, p, v, q, w, dt):
    """Arrays shaped (N, T+1, R, ...)."""
    N, T1, R = p.shape[:3]
    n, k, r = np.meshgrid(np.arange(N), np.arange(T1), np.arange(R), indexing="ij")
    data = _table([n, k * dt, r], [p, v, q, w])
    np.savetxt(path, data, delimiter=",", header=STATE_HEADER, comments="",
               fmt=["%d", "%.17g", "%d"] + ["%.17g"] * 13)


def write_controls_csv(path, force, arm):
    N, T, R = force.shape[:3]
    n, k, r = np.meshgrid(np.arange(N), np.arange(T), np.arange(R), indexing="ij")
    data = _table([n, k, r], [force, arm])
    np.savetxt(path, data, delimiter=",", header=CONTROL_HEADER, comments="",
               fmt=["%d", "%d", "%d"] + ["%.17g"] * 6)


def read_trajectories_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    N, R = int(data[:, 0].max()) + 1, int(data[:, 2].max()) + 1
    T1 = len(data) // (N * R)
    arr = data.reshape(N, T1, R, 16)
    return arr[..., 3:6], arr[..., 6:9], arr[..., 9:13], arr[..., 13:16]


def read_controls_csv(path, n_traj, n_steps, n_rods):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    arr = data.reshape(n_traj, n_steps, n_rods, 9)
    return arr[..., 3:6], arr[..., 6:9]


def save_dataset(ds: Dataset, out_dir, extra: dict | None = None):
    """Write ``trajectories.csv``, ``controls.csv``, ``config.json`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(out / "trajectories.csv", ds.p, ds.v, ds.q, ds.w, ds.config.dt)
    write_controls_csv(out / "controls.csv", ds.force, ds.arm)
    ds.config.to_json(out / "config.json")
    manifest = {
        "files": {"trajectories": "trajectories.csv", "controls": "controls.csv", "config": "config.json"},
        "config_hash": ds.config.config_hash(),
        "preset": ds.config.name,
        "seed": ds.seed,
        "n_traj": ds.n_traj,
        "n_steps": ds.n_steps,
        "n_rods": ds.config.topology.n_rods,
        "splits": {k: list(map(int, v)) for k, v in ds.splits.items()},
        "true_params": ds.params.to_dict() if ds.params is not None else None,
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(path) -> Dataset:
    """Inverse of ``save_dataset``; ``path`` is the directory or its manifest."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    with open(root / "manifest.json") as fh:
        man = json.load(fh)
    config = SystemConfig.from_json(root / man["files"]["config"])
    p, v, q, w = read_trajectories_csv(root / man["files"]["trajectories"])
    force, arm = read_controls_csv(root / man["files"]["controls"], man["n_traj"], man["n_steps"], man["n_rods"])
    params = EngineParams.from_dict(man["true_params"]) if man.get("true_params") else None
    return Dataset(config, params, p, v, q, w, force, arm, man["splits"], man.get("seed", 0))


def load_manifest(path):
    path = Path(path)
    with open(path if path.is_file() else path / "manifest.json") as fh:
        return json.load(fh)
