"""Error curves, success statistics and the end-to-end experiment protocols."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blackbox, ident, koopman
from .core import SystemConfig, SystemState, Trajectory
from .errors import HorizonMismatch, IdentificationError, RodSpringError, SimulationBlowUp
from .params import EngineParams
from .presets import load_preset
from .sim import Dataset, PerturbationSchedule, rollout, sample_dataset

SUCCESS_TOL = 0.05
PROTOCOLS = ("simple_ratio", "simple_known_M", "icosa_uniform", "icosa_nonuniform",
             "data_efficiency", "generalization")


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

@dataclass
class ErrorCurve:
    pos_mse: np.ndarray   # (T+1,) mean over rods of squared position error
    quat_mse: np.ndarray  # (T+1,) mean over rods and components, sign-aligned

    @property
    def pos_acc(self):
        return np.cumsum(self.pos_mse)

    @property
    def quat_acc(self):
        return np.cumsum(self.quat_mse)

    def accumulated_at(self, step, which="pos"):
        acc = self.pos_acc if which == "pos" else self.quat_acc
        return float(acc[min(step, len(acc) - 1)])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "pos_mse", "quat_mse", "pos_mse_acc", "quat_mse_acc"])
            for k, row in enumerate(zip(self.pos_mse, self.quat_mse, self.pos_acc, self.quat_acc)):
                wr.writerow([k, *(repr(float(x)) for x in row)])


def compare_rollouts(predicted: Trajectory, reference: Trajectory) -> ErrorCurve:
    if predicted.p.shape != reference.p.shape:
        raise HorizonMismatch(f"predicted {predicted.p.shape} vs reference {reference.p.shape}")
    pos = np.mean(np.sum((predicted.p - reference.p) ** 2, axis=-1), axis=-1)
    dot = np.sum(predicted.q * reference.q, axis=-1, keepdims=True)
    aligned = np.where(dot < 0, -predicted.q, predicted.q)
    quat = np.mean((aligned - reference.q) ** 2, axis=(-1, -2))
    return ErrorCurve(pos, quat)


# ---------------------------------------------------------------------------
# success statistics
# ---------------------------------------------------------------------------

def relative_errors(estimates: dict, truth: dict):
    return {k: abs(float(estimates[k]) - float(t)) / abs(float(t)) for k, t in truth.items()}


@dataclass
class RunResult:
    seed: int
    estimates: dict
    truth: dict
    rel_errors: dict
    success: bool
    sec_per_iter: float = 0.0
    note: str = ""


@dataclass
class SuccessReport:
    method: str
    runs: list = field(default_factory=list)

    def add(self, seed, estimates, truth, sec_per_iter=0.0, note=""):
        if estimates is None:
            self.runs.append(RunResult(seed, {}, truth, {}, False, sec_per_iter, note))
            return self.runs[-1]
        err = relative_errors(estimates, truth)
        ok = bool(max(err.values()) <= SUCCESS_TOL) if err else False
        self.runs.append(RunResult(seed, {k: float(estimates[k]) for k in truth}, truth, err, ok,
                                   sec_per_iter, note))
        return self.runs[-1]

    @property
    def success_ratio(self):
        return float(np.mean([r.success for r in self.runs])) if self.runs else 0.0

    def stats(self):
        names = list(self.runs[0].truth) if self.runs else []
        out = {}
        for n in names:
            vals = [r.estimates[n] for r in self.runs if n in r.estimates]
            if vals:
                out[n] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        return out

    def mean_sec_per_iter(self):
        return float(np.mean([r.sec_per_iter for r in self.runs])) if self.runs else 0.0

    def to_dict(self, timing=False):
        d = {
            "method": self.method,
            "success_ratio": self.success_ratio,
            "stats": self.stats(),
            "runs": [
                {"seed": r.seed, "estimates": r.estimates, "truth": r.truth,
                 "rel_errors": r.rel_errors, "success": r.success, "note": r.note}
                for r in self.runs
            ],
        }
        if timing:
            d["sec_per_iter"] = self.mean_sec_per_iter()
        return d

    def table_row(self):
        stats = self.stats()
        if len(stats) > 6:
            worst = [max(r.rel_errors.values()) for r in self.runs if r.rel_errors]
            cells = [f"{len(stats)} params, max rel err {np.mean(worst):.2e}" if worst else "no estimates"]
        else:
            cells = [f"{n}={s['mean']:.2f}±{s['std']:.2f}" for n, s in stats.items()]
        return f"{self.method:<18} {' '.join(cells)}  sec/itr={self.mean_sec_per_iter():.3g}  success={self.success_ratio:.2f}"


@dataclass
class SeedResult:
    seed: int
    curves: dict = field(default_factory=dict)     # label -> ErrorCurve
    fits: dict = field(default_factory=dict)       # label -> JSON-able fit details
    extra: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


@dataclass
class ProtocolResult:
    name: str
    reports: dict                                  # method -> SuccessReport
    seeds: list                                    # SeedResult per seed
    settings: dict

    def summary(self):
        return {
            "protocol": self.name,
            "settings": self.settings,
            "methods": {m: r.to_dict() for m, r in self.reports.items()},
            "final_accumulated": {
                s.seed: {lab: {"pos": c.accumulated_at(len(c.pos_mse) - 1),
                               "quat": c.accumulated_at(len(c.pos_mse) - 1, "quat")}
                         for lab, c in s.curves.items()}
                for s in self.seeds
            },
            "extra": {s.seed: s.extra for s in self.seeds},
        }

    def table(self):
        lines = [f"protocol {self.name}"]
        lines += [r.table_row() for r in self.reports.values()]
        for s in self.seeds:
            for lab, c in s.curves.items():
                lines.append(f"  seed {s.seed} {lab:<22} acc pos MSE @{len(c.pos_mse) - 1}: "
                             f"{c.accumulated_at(len(c.pos_mse) - 1):.3e}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# protocol helpers
# ---------------------------------------------------------------------------

def _n_traj_for_train(n_train, split=(1000, 200, 100)):
    return int(round(n_train * sum(split) / split[0]))


def _curve(params_or_model, config, init: SystemState, reference: Trajectory, horizon, controls=None):
    try:
        if isinstance(params_or_model, koopman.KoopmanModel):
            pred = koopman.koopman_rollout(params_or_model, init, config, horizon)
        else:
            pred = rollout(init, config, params_or_model, horizon, controls)
    except SimulationBlowUp as exc:
        return None, f"blow-up at step {exc.step}"
    return compare_rollouts(pred, reference), ""


def _ratio_truth_simple(config):
    p = EngineParams.from_config(config)
    return {"K/M": float(p.stiffness[0] / p.mass[0]), "c/M": float(p.damping[0] / p.mass[0])}


def _single_ratio_estimates(fit: ident.FitResult):
    est = fit.named_estimates()
    return {k: est[k] for k in ("K/M", "c/M", "K/I11", "c/I11") if k in est}


def physical_truth(config):
    p = EngineParams.from_config(config)
    return dict(zip(p.physical_names(), map(float, p.physical_vector())))


def physical_estimates(params: EngineParams):
    return dict(zip(params.physical_names(), map(float, params.physical_vector())))


def _held_out(ds: Dataset):
    for split in ("test", "val", "train"):
        if ds.splits.get(split):
            return ds.splits[split][0]
    raise ValueError("dataset has no trajectories")


def _bb_reference(ds: Dataset, horizon):
    tr = ds.trajectory(_held_out(ds))
    return Trajectory(tr.p[: horizon + 1], tr.v[: horizon + 1], tr.q[: horizon + 1], tr.w[: horizon + 1],
                      tr.force[:horizon], tr.arm[:horizon], tr.dt, tr.config_ref)


def _test_init_and_reference(ds: Dataset, config, horizon, params=None):
    init = ds.initial_state(_held_out(ds))
    ref = rollout(init, config, params, horizon)
    return init, ref


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _simple(seeds, o, known_mass):
    config = load_preset("simple")
    methods = o.get("methods", ("ident_closed", "ident_iterative", "cma", "local_search"))
    reports = {m: SuccessReport(m) for m in methods}
    results = []
    for seed in seeds:
        sr = SeedResult(seed)
        ds = sample_dataset(config, None, o.get("n_traj", 100), o.get("n_steps", 2000), seed=seed)
        init, ref = _test_init_and_reference(ds, config, o.get("curve_horizon", 2000))
        truth = ({"K": 100.0, "c": 10.0} if known_mass else _ratio_truth_simple(config))
        mass = float(config.topology.rods[0].mass)
        batch = ident.build_features(ds, config, ident.SINGLE)
        for m in methods:
            t0 = time.perf_counter()
            if m.startswith("ident"):
                fit = (ident.fit_closed_form(batch) if m == "ident_closed"
                       else ident.fit_iterative(batch, ident.FitConfig(method="iterative", shuffle_seed=seed)))
                spi = float(np.mean(fit.sec_per_iter))
                sr.fits[m] = fit.to_dict()
                if known_mass:
                    absolute = ident.resolve_absolute_params(fit, config, known_mass=mass).params
                    est = {"K": float(absolute.stiffness[0]), "c": float(absolute.damping[0])}
                    model = absolute
                else:
                    est = {"K/M": fit.named_estimates()["K/M"], "c/M": fit.named_estimates()["c/M"]}
                    model = fit.ratios
            else:
                space, to_params = (blackbox.known_mass_map(config, mass) if known_mass
                                    else blackbox.free_mass_map(config))
                loss = blackbox.make_loss(_bb_reference(ds, o.get("bb_horizon", 2000)), config, to_params)
                if m == "cma":
                    res = blackbox.cma_es(loss, space, blackbox.CmaConfig(
                        seed=seed, tol=o.get("cma_tol", 1.0), max_iter=o.get("bb_iters", 30)))
                else:
                    res = blackbox.local_search(loss, space, max_iter=o.get("bb_iters", 30))
                spi = res.sec_per_iter
                x = res.x
                est = ({"K": x[0], "c": x[1]} if known_mass else {"K/M": x[0] / x[2], "c/M": x[1] / x[2]})
                sr.fits[m] = {"x": dict(zip(space.names, map(float, x))), "loss": res.loss,
                              "stop": res.stop_reason, "iterations": len(res.history)}
                sr.extra.setdefault("histories", {})[m] = res
                model = to_params(x[None])
                model = EngineParams(*(np.asarray(getattr(model, f))[0] for f in
                                       ("stiffness", "damping", "mass", "i11", "i33")))
            sr.timing[m] = {"sec_per_iter": spi, "wall": time.perf_counter() - t0}
            reports[m].add(seed, est, truth, spi)
            curve, note = _curve(model, config, init, ref, ref.n_steps)
            if curve is not None:
                sr.curves[m] = curve
        results.append(sr)
    return reports, results


def _icosa_data(config, seed, o):
    split = (1000, 200, 100)
    n = o.get("n_traj") or _n_traj_for_train(o.get("n_train", 50), split)
    return sample_dataset(config, None, n, o.get("n_steps", 500), seed=seed, split=split)


def _protocol_icosa_uniform(seeds, o):
    config = load_preset("icosa_uniform")
    truth_p = EngineParams.from_config(config)
    t = truth_p.ratios(config.topology)
    truth = {"K/M": float(t.lin_k[0]), "c/M": float(t.lin_c[0]),
             "K/I11": float(t.ang_k[0]), "c/I11": float(t.ang_c[0])}
    reports = {"ident_closed": SuccessReport("ident_closed")}
    results = []
    for seed in seeds:
        sr = SeedResult(seed)
        ds = _icosa_data(config, seed, o)
        init, ref = _test_init_and_reference(ds, config, o.get("curve_horizon", 2000))
        t0 = time.perf_counter()
        fit = ident.fit_closed_form(ident.build_features(ds, config, ident.SINGLE))
        sr.timing["ident_closed"] = time.perf_counter() - t0
        reports["ident_closed"].add(seed, _single_ratio_estimates(fit), truth, sr.timing["ident_closed"])
        sr.fits["ident_closed"] = fit.to_dict()
        sr.curves["ident_closed"], _ = _curve(fit.ratios, config, init, ref, ref.n_steps)
        t0 = time.perf_counter()
        km = koopman.fit_koopman(ds, config, per_rod=o.get("koopman_per_rod", True))
        sr.timing["koopman"] = time.perf_counter() - t0
        sr.fits["koopman"] = {"residual_rms": km.residual_rms, "rank": km.rank}
        curve, note = _curve(km, config, init, ref, ref.n_steps)
        if curve is not None:
            sr.curves["koopman"] = curve
        else:
            sr.extra["koopman"] = note
        results.append(sr)
    return reports, results


def _fit_physical(ds, config, tying, total_mass):
    fit = ident.fit_closed_form(ident.build_features(ds, config, tying))
    est = ident.resolve_absolute_params(fit, config, total_mass=total_mass)
    return fit, est.params


def _protocol_icosa_nonuniform(seeds, o):
    reports = {"single": SuccessReport("single"), "multiple": SuccessReport("multiple")}
    results = []
    for seed in seeds:
        sr = SeedResult(seed)
        config = load_preset("icosa_nonuniform", seed=seed, sigma_frac=o.get("sigma", 0.2))
        truth = physical_truth(config)
        total = float(sum(r.mass for r in config.topology.rods))
        ds = _icosa_data(config, seed, o)
        init, ref = _test_init_and_reference(ds, config, o.get("curve_horizon", 2000))
        for tying in ("single", "multiple"):
            t0 = time.perf_counter()
            fit, params = _fit_physical(ds, config, tying, total)
            spi = time.perf_counter() - t0
            sr.timing[tying] = spi
            reports[tying].add(seed, physical_estimates(params), truth, spi)
            sr.fits[tying] = fit.to_dict()
            sr.curves[tying], _ = _curve(params, config, init, ref, ref.n_steps)
        results.append(sr)
    return reports, results


def _protocol_data_efficiency(seeds, o):
    fractions = o.get("fractions", (0.1, 0.01, 0.001, 0.0001))
    reports = {f"ident@{f:g}": SuccessReport(f"ident@{f:g}") for f in fractions}
    results = []
    for seed in seeds:
        sr = SeedResult(seed)
        config = load_preset("icosa_nonuniform", seed=seed, sigma_frac=o.get("sigma", 0.2))
        truth = physical_truth(config)
        total = float(sum(r.mass for r in config.topology.rods))
        ds = sample_dataset(config, None, o.get("n_traj", 1898), o.get("n_steps", 500), seed=seed)
        sr.extra["pool"] = ds.pool_size("train")
        init, ref = _test_init_and_reference(ds, config, o.get("curve_horizon", 2000))
        for f in fractions:
            tr = ds.transitions("train", fraction=f, seed=seed)
            sr.extra[f"n_transitions@{f:g}"] = len(tr)
            label = f"ident@{f:g}"
            t0 = time.perf_counter()
            try:
                fit, params = _fit_physical(tr, config, ident.MULTIPLE, total)
                reports[label].add(seed, physical_estimates(params), truth, time.perf_counter() - t0)
                sr.fits[label] = fit.to_dict()
                sr.curves[label], _ = _curve(params, config, init, ref, ref.n_steps)
            except IdentificationError as exc:
                reports[label].add(seed, None, truth, note=str(exc))
                sr.extra[label] = f"{type(exc).__name__}: {exc}"
            klabel = f"koopman@{f:g}"
            try:
                km = koopman.fit_koopman(tr, config, per_rod=True)
                sr.fits[klabel] = {"residual_rms": km.residual_rms, "rank": km.rank}
                curve, note = _curve(km, config, init, ref, ref.n_steps)
                if curve is not None:
                    sr.curves[klabel] = curve
                else:
                    sr.extra[klabel] = note
            except IdentificationError as exc:
                sr.extra[klabel] = f"{type(exc).__name__}: {exc}"
        del ds
        results.append(sr)
    return reports, results


def _protocol_generalization(seeds, o):
    h_values = o.get("h_values", (1.0, 2.5))
    horizons = o.get("horizons", (4000, 20000))
    reports = {f"h@{h:g}": SuccessReport(f"h@{h:g}") for h in h_values}
    results = []
    for seed in seeds:
        sr = SeedResult(seed)
        config = load_preset(o.get("preset", "icosa_uniform"))
        total = float(sum(r.mass for r in config.topology.rods))
        ds = _icosa_data(config, seed, o)
        tying = ident.MULTIPLE if config.name == "icosa_nonuniform" else ident.SINGLE
        fit, frozen = _fit_physical(ds, config, tying, total)
        sr.fits["no_force_fit"] = fit.to_dict()
        schedule = PerturbationSchedule(o.get("period", 100), o.get("magnitude", 10.0), rng_seed=seed)
        for h in h_values:
            truth_params = EngineParams.from_config(config, h=h)
            forced = sample_dataset(config, truth_params, o.get("forced_traj", 10), o.get("forced_steps", 2000),
                                    seed=seed + 1000, split=(1,), perturbation=schedule)
            cf = ident.tune_control_scalar(forced.transitions("train"), config, frozen)
            label = f"h@{h:g}"
            reports[label].add(seed, {"h": cf.h}, {"h": h})
            sr.fits[label] = {"h": cf.h, "h_closed_form": cf.h_closed_form, "trace": cf.trace,
                              "tail_variance": cf.tail_variance, "n_rows": cf.n_rows}
            tuned = frozen.replace(h=cf.h)
            init = ds.initial_state(_held_out(ds))
            for H in horizons:
                ref = rollout(init, config, truth_params, H, perturbation=schedule, traj_index=seed)
                controls = (ref.force, ref.arm)
                curve, note = _curve(tuned, config, init, ref, H, controls)
                if curve is not None:
                    sr.curves[f"{label}/{H}"] = curve
                else:
                    sr.extra[f"{label}/{H}"] = note
        results.append(sr)
    return reports, results


_RUNNERS = {
    "simple_ratio": lambda s, o: _simple(s, o, known_mass=False),
    "simple_known_M": lambda s, o: _simple(s, o, known_mass=True),
    "icosa_uniform": _protocol_icosa_uniform,
    "icosa_nonuniform": _protocol_icosa_nonuniform,
    "data_efficiency": _protocol_data_efficiency,
    "generalization": _protocol_generalization,
}


def run_protocol(name, seeds=(0,), overrides=None) -> ProtocolResult:
    """Generate data, fit, evaluate. Deterministic per seed (timings aside)."""
    if name not in _RUNNERS:
        raise KeyError(f"unknown protocol {name!r}; choose from {PROTOCOLS}")
    overrides = dict(overrides or {})
    seeds = list(seeds)
    try:
        reports, results = _RUNNERS[name](seeds, overrides)
    except RodSpringError as exc:
        exc.protocol = name
        exc.args = (f"protocol {name}: {exc}",) + exc.args[1:]
        raise
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in overrides.items()}
    return ProtocolResult(name, reports, results, settings)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, blackbox.OptimResult):
        return {"x": o.x.tolist(), "loss": o.loss, "stop": o.stop_reason}
    raise TypeError(type(o))


def plot_curves(curves: dict, path, which="pos", log=True):
    """One SVG with a labeled series per curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "rodspring"
    plt.rcParams["svg.fonttype"] = "none"  # keep labels as text
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, c in curves.items():
        y = c.pos_acc if which == "pos" else c.quat_acc
        ax.plot(np.arange(len(y)), np.maximum(y, 1e-300) if log else y, label=label)
    ax.set_xlabel("timestep")
    ax.set_ylabel(f"accumulated {'position' if which == 'pos' else 'quaternion'} MSE")
    if log:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(result: ProtocolResult, out_dir, plots=True):
    """Write ``<out>/<protocol>/<seed>/{summary.json, fit_report.json, curves_*.csv, plot_*.svg}``.

    Wall-clock timings go to ``timing.json`` so the other files are
    byte-identical across reruns.
    """
    root = Path(out_dir) / result.name
    written = []
    summary = result.summary()
    for sr in result.seeds:
        d = root / str(sr.seed)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create report directory {d}: {exc}") from exc
        seed_summary = {
            "protocol": result.name,
            "seed": sr.seed,
            "settings": result.settings,
            "methods": {m: {**r.to_dict(), "runs": [x for x in r.to_dict()["runs"] if x["seed"] == sr.seed]}
                        for m, r in result.reports.items()},
            "final_accumulated": summary["final_accumulated"][sr.seed],
            "extra": {k: v for k, v in sr.extra.items() if k != "histories"},
        }
        _dump_json(seed_summary, d / "summary.json")
        _dump_json(sr.fits, d / "fit_report.json")
        _dump_json(sr.timing, d / "timing.json")
        written += [d / "summary.json", d / "fit_report.json", d / "timing.json"]
        for label, hist in sr.extra.get("histories", {}).items():
            p = d / f"history_{label}.csv"
            names = list(sr.fits[label]["x"])
            blackbox.write_history_csv(hist, names, p)
            written.append(p)
        for label, c in sr.curves.items():
            p = d / f"curves_{label.replace('/', '_')}.csv"
            c.write_csv(p)
            written.append(p)
        if plots and sr.curves:
            for which in ("pos", "quat"):
                p = d / f"plot_{'position' if which == 'pos' else 'quaternion'}.svg"
                plot_curves(sr.curves, p, which)
                written.append(p)
    root.mkdir(parents=True, exist_ok=True)
    _dump_json(summary, root / "summary.json")
    written.append(root / "summary.json")
    return written


def emit_curves(curves: dict, out_dir, name="comparison", plots=True):
    """Write a set of curves (possibly empty) with a summary JSON."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for label, c in curves.items():
        p = d / f"curves_{label}.csv"
        c.write_csv(p)
        written.append(p)
    _dump_json({"name": name, "final_accumulated": {
        k: c.accumulated_at(len(c.pos_mse) - 1) for k, c in curves.items()}}, d / "summary.json")
    written.append(d / "summary.json")
    if plots and curves:
        p = d / "plot_position.svg"
        plot_curves(curves, p)
        written.append(p)
    return written
