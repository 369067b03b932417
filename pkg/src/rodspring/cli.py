"""``rodspring`` command line: simulate, identify, rollout, protocol, report.

Exit codes: 0 success, 2 configuration or usage error, 3 simulation blow-up,
4 identification failure (rank deficiency, too little data, bad estimates).
The default seed comes from ``RODSPRING_SEED`` (0 if unset).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import blackbox, evaluation, ident, io, koopman
from .core import SystemConfig
from .errors import IdentificationError, SimulationBlowUp, TopologyError
from .params import EngineParams
from .presets import PRESETS, load_preset
from .sim import PerturbationSchedule, rollout, sample_dataset

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_IDENT = 0, 2, 3, 4
METHODS = ("ident-closed", "ident-iterative", "koopman", "cma", "local-search")


class ConfigError(Exception):
    pass


def _default_seed():
    raw = os.environ.get("RODSPRING_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"RODSPRING_SEED must be an integer, got {raw!r}")


def parse_seeds(text):
    """``"3"``, ``"0,2,5"`` or an inclusive range ``"0..9"``."""
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def _load_config(args):
    if getattr(args, "config", None):
        return SystemConfig.from_json(args.config)
    return load_preset(args.preset, seed=args.seed, sigma_frac=args.sigma)


def _echo(effective: dict, out=None):
    text = json.dumps(effective, indent=2, sort_keys=True, default=str)
    print("effective config:")
    print(text)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "effective_config.json").write_text(text + "\n")


def _perturbation(args):
    if not args.perturb_period:
        return None
    return PerturbationSchedule(args.perturb_period, args.perturb_magnitude, rng_seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    config = _load_config(args)
    params = EngineParams.from_config(config, h=args.h)
    eff = {"command": "simulate", "preset": args.preset, "config": args.config, "seed": args.seed,
           "traj": args.traj, "steps": args.steps, "sigma": args.sigma, "h": args.h,
           "perturb_period": args.perturb_period, "perturb_magnitude": args.perturb_magnitude,
           "out": args.out, "config_hash": config.config_hash(),
           "n_parameters": len(params.physical_names()),
           "parameters": evaluation.physical_estimates(params)}
    _echo(eff, args.out)
    ds = sample_dataset(config, params, args.traj, args.steps, seed=args.seed,
                        split=tuple(args.split), perturbation=_perturbation(args))
    man = io.save_dataset(ds, args.out, extra={"h": args.h})
    print(f"wrote {ds.n_traj} trajectories of {ds.n_steps + 1} states to {args.out} "
          f"(config {man['config_hash']})")
    return EXIT_OK


def _fit_table(estimates: dict, truth: dict | None):
    lines = [f"{'parameter':<22}{'estimate':>16}" + (f"{'truth':>14}{'rel.err':>11}" if truth else "")]
    for k, v in estimates.items():
        row = f"{k:<22}{v:>16.6g}"
        if truth and k in truth:
            row += f"{truth[k]:>14.6g}{abs(v - truth[k]) / abs(truth[k]):>11.2e}"
        lines.append(row)
    return "\n".join(lines)


def cmd_identify(args):
    ds = io.load_dataset(args.dataset)
    config = ds.config
    if args.fraction is not None and not 0 < args.fraction <= 1:
        raise ConfigError("--fraction must lie in (0, 1]")
    tr = ds.transitions("train", fraction=args.fraction, seed=args.seed)
    eff = {"command": "identify", "dataset": args.dataset, "method": args.method, "tying": args.tying,
           "fraction": args.fraction, "n_transitions": len(tr), "seed": args.seed,
           "known_mass": args.known_mass, "total_mass": args.total_mass, "out": args.out}
    _echo(eff, args.out)
    truth_params = ds.params
    report = {"method": args.method, "n_transitions": len(tr)}
    if args.method in ("ident-closed", "ident-iterative"):
        batch = ident.build_features(tr, config, args.tying)
        fit = (ident.fit_closed_form(batch) if args.method == "ident-closed"
               else ident.fit_iterative(batch, ident.FitConfig(method="iterative", shuffle_seed=args.seed)))
        est = fit.named_estimates()
        truth = None
        if truth_params is not None and args.tying == ident.SINGLE and config.topology.n_rods >= 1:
            t = truth_params.ratios(config.topology)
            truth = {"K/M": t.lin_k[0], "c/M": t.lin_c[0], "K/I11": t.ang_k[0], "c/I11": t.ang_c[0]}
        print(_fit_table(est, truth))
        print(f"residual RMS: lin {fit.residual_rms['lin']:.3e}  ang {fit.residual_rms['ang']:.3e}")
        report.update(fit.to_dict(timing=True))
        if args.known_mass is not None or args.total_mass is not None:
            ab = ident.resolve_absolute_params(fit, config, known_mass=args.known_mass,
                                               total_mass=args.total_mass)
            phys = evaluation.physical_estimates(ab.params)
            print(_fit_table(phys, evaluation.physical_estimates(truth_params) if truth_params else None))
            report["absolute"] = ab.params.to_dict()
    elif args.method == "koopman":
        km = koopman.fit_koopman(tr, config, per_rod=not args.shared)
        print(f"koopman fit: {km.weights.shape[0]} model(s), {km.spec.n_features} features, "
              f"residual RMS {km.residual_rms:.3e}, rank {km.rank}")
        if km.residual_rms > 1e-3:
            print("warning: high residual; the lifted basis does not span the dynamics for this data")
        report.update(km.to_dict())
    else:
        if args.known_mass is not None:
            space, to_params = blackbox.known_mass_map(config, args.known_mass)
        else:
            space, to_params = blackbox.free_mass_map(config)
        ref = ds.trajectory(ds.splits["test"][0] if ds.splits.get("test") else 0)
        H = min(args.horizon, ref.n_steps)
        ref = type(ref)(ref.p[:H + 1], ref.v[:H + 1], ref.q[:H + 1], ref.w[:H + 1], ref.force[:H],
                        ref.arm[:H], ref.dt)
        loss = blackbox.make_loss(ref, config, to_params)
        if args.method == "cma":
            res = blackbox.cma_es(loss, space, blackbox.CmaConfig(seed=args.seed, max_iter=args.iters))
        else:
            res = blackbox.local_search(loss, space, max_iter=args.iters)
        est = dict(zip(space.names, map(float, res.x)))
        truth = None
        if truth_params is not None:
            truth = {"K": float(truth_params.stiffness[0]), "c": float(truth_params.damping[0]),
                     "M": float(truth_params.mass[0])}
        print(_fit_table(est, truth))
        print(f"loss {res.loss:.3e} after {len(res.history)} iterations ({res.stop_reason})")
        report.update({"estimates": est, "loss": res.loss, "stop": res.stop_reason})
        if args.out:
            blackbox.write_history_csv(res, space.names, Path(args.out) / "history.csv")
    if args.out:
        with open(Path(args.out) / "fit_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, default=evaluation._json_default)
    return EXIT_OK


def cmd_rollout(args):
    config = _load_config(args)
    truth = EngineParams.from_config(config, h=args.h)
    params = truth
    if args.fit:
        with open(args.fit) as fh:
            rep = json.load(fh)
        if "absolute" in rep:
            params = EngineParams.from_dict(rep["absolute"])
        elif "ratios" in rep:
            from .params import RatioParams
            params = RatioParams.from_dict(rep["ratios"])
        else:
            raise ConfigError(f"{args.fit} holds no engine parameters")
    eff = {"command": "rollout", "preset": args.preset, "config": args.config, "fit": args.fit,
           "steps": args.steps, "seed": args.seed, "h": args.h, "out": args.out,
           "perturb_period": args.perturb_period, "perturb_magnitude": args.perturb_magnitude}
    _echo(eff, args.out)
    from .sim import InitDistribution
    init = InitDistribution().sample(config, np.random.default_rng([args.seed, 0]))
    pert = _perturbation(args)
    ref = rollout(init, config, truth, args.steps, perturbation=pert)
    pred = rollout(init, config, params, args.steps, (ref.force, ref.arm)) if args.fit else ref
    out = Path(args.out)
    io.write_trajectories_csv(out / "rollout.csv", pred.p[None], pred.v[None], pred.q[None], pred.w[None],
                              config.dt)
    io.write_controls_csv(out / "controls.csv", pred.force[None], pred.arm[None])
    if args.fit:
        curve = evaluation.compare_rollouts(pred, ref)
        evaluation.emit_curves({"fit": curve}, out, "rollout")
        print(f"accumulated position MSE at step {args.steps}: {curve.accumulated_at(args.steps):.3e}")
    print(f"wrote {args.steps + 1} states to {out / 'rollout.csv'}")
    return EXIT_OK


def _parse_overrides(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
        if isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def cmd_protocol(args):
    if args.name not in evaluation.PROTOCOLS:
        raise ConfigError(f"unknown protocol {args.name!r}; choose from {', '.join(evaluation.PROTOCOLS)}")
    seeds = parse_seeds(args.seeds) if args.seeds is not None else [args.seed]
    overrides = _parse_overrides(args.set)
    eff = {"command": "protocol", "name": args.name, "seeds": seeds, "overrides": overrides, "out": args.out}
    _echo(eff, Path(args.out) / args.name)
    result = evaluation.run_protocol(args.name, seeds, overrides)
    evaluation.emit_report(result, args.out, plots=not args.no_plots)
    print(result.table())
    if args.name == "generalization":
        for s in result.seeds:
            for k, v in s.fits.items():
                if k.startswith("h@"):
                    trace = ", ".join(f"{x:.4f}" for x in v["trace"])
                    print(f"  seed {s.seed} {k} convergence trace: {trace}")
    return EXIT_OK


def cmd_report(args):
    root = Path(args.path)
    summaries = sorted(root.rglob("summary.json")) if root.is_dir() else [root]
    if not summaries:
        raise ConfigError(f"no summary.json under {root}")
    for p in summaries:
        with open(p) as fh:
            s = json.load(fh)
        print(f"== {p}")
        for m, r in s.get("methods", {}).items():
            cells = " ".join(f"{n}={st['mean']:.4g}±{st['std']:.2g}" for n, st in r.get("stats", {}).items())
            print(f"{m:<18} {cells}  success={r.get('success_ratio', 0):.2f}")
        if args.plot and p.parent.glob("curves_*.csv"):
            curves = {}
            for c in sorted(p.parent.glob("curves_*.csv")):
                data = np.loadtxt(c, delimiter=",", skiprows=1, ndmin=2)
                curves[c.stem[len("curves_"):]] = evaluation.ErrorCurve(data[:, 1], data[:, 2])
            if curves:
                evaluation.plot_curves(curves, p.parent / "plot_position.svg", "pos", log=not args.linear)
                evaluation.plot_curves(curves, p.parent / "plot_quaternion.svg", "quat", log=not args.linear)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser(default_seed):
    ap = argparse.ArgumentParser(prog="rodspring", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="worker cap (computation is single-threaded)")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--preset", choices=PRESETS, default="simple")
        g.add_argument("--config", help="system config JSON")
        p.add_argument("--sigma", type=float, default=0.2, help="parameter spread for icosa_nonuniform")
        p.add_argument("--h", type=float, default=1.0, help="control-force scale of the ground truth")
        p.add_argument("--perturb-period", type=int, default=0, help="push a random rod every N steps (0: off)")
        p.add_argument("--perturb-magnitude", type=float, default=10.0)

    p = sub.add_parser("simulate", help="sample a dataset")
    scenario(p)
    p.add_argument("--traj", type=int, default=100)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--split", type=float, nargs="+", default=[1000, 200, 100])
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--out", default="out/dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", help="fit a model to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=METHODS, default="ident-closed")
    p.add_argument("--tying", choices=(ident.SINGLE, ident.MULTIPLE), default=ident.SINGLE)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--known-mass", type=float, default=None)
    p.add_argument("--total-mass", type=float, default=None)
    p.add_argument("--shared", action="store_true", help="koopman: one map for all rods")
    p.add_argument("--horizon", type=int, default=2000, help="black-box reference horizon")
    p.add_argument("--iters", type=int, default=30, help="black-box iteration budget")
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("rollout", help="roll out ground truth or a fitted model")
    scenario(p)
    p.add_argument("--fit", help="fit_report.json from identify")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--out", default="out/rollout")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("protocol", help="run an experiment protocol")
    p.add_argument("name")
    p.add_argument("--seeds", default=None, help="e.g. 0..9 or 0,3,5")
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="protocol override")
    p.add_argument("--out", default="out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("report", help="print summaries and redraw plots")
    p.add_argument("path")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--linear", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    try:
        parser = build_parser(_default_seed())
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, TopologyError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationBlowUp as exc:
        print(f"simulation blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except IdentificationError as exc:
        hint = ""
        if type(exc).__name__ in ("RankDeficient", "InsufficientData"):
            hint = " (use more data: raise --fraction, or switch to --tying single)"
        print(f"identification failed: {exc}{hint}", file=sys.stderr)
        return EXIT_IDENT


if __name__ == "__main__":
    sys.exit(main())
