"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 a
verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DelocoagError
from .scenario import ENV_PREFIX, load_scenario, parse_knots

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_FAIL = 0, 1, 2, 3


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser():
    p = argparse.ArgumentParser(prog="delocoag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("det-solve", "direct deterministic solve"),
                           ("picard", "windowed Picard iteration"),
                           ("stoch-solve", "stochastic particle replicas"),
                           ("verify", "run the property suite"),
                           ("flow-probe", "print residence time and flow diagnostics")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--scenario", required=True, help="scenario TOML file")
        s.add_argument("--out", default=_env("OUT"), help="output directory")
        s.add_argument("--seed", type=int, default=None, help="RNG seed (u64)")
        s.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: available cores)")
        s.add_argument("--knots", default=None, help="comma-separated output times")
        if name == "stoch-solve":
            s.add_argument("--N", type=int, default=None, help="particles per unit mass")
            s.add_argument("--R", type=int, default=None, help="replica count")
        if name == "verify":
            s.add_argument("--skip", default="", help="comma-separated check ids to skip")
            s.add_argument("--only", default="", help="comma-separated check ids to run")
            s.add_argument("--stoch-N", default="1000,10000,100000",
                           help="particle numbers for the convergence check")
    return p


def _workers(args):
    if args.workers is not None:
        return max(1, args.workers)
    if _env("WORKERS"):
        return max(1, int(_env("WORKERS")))
    return os.cpu_count() or 1


def _outdir(args, sc):
    out = Path(args.out or f"out-{sc.name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _knots(args, sc):
    ks = parse_knots(args.knots) if args.knots else sc.knots
    for k in ks:
        if not 0.0 <= k <= sc.T + 1e-12:
            raise ConfigError(f"knot {k} outside [0, T]")
    return ks


# -- outputs ----------------------------------------------------------------------

def write_pairings(path, times, measures, funcs):
    from .measures import pair
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f.name for f in funcs])
        for t, m in zip(times, measures):
            w.writerow([_fmt(t)] + [_fmt(pair(f, m)) for f in funcs])


def write_profiles(path, times, measures):
    """Number and mass density per cell at each knot (grid form, first axis)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cell", "x", "number_density", "mass_density"])
        for t, m in zip(times, measures):
            dens = np.asarray(m.values) / m.grid.volume
            for i, x in enumerate(m.grid.centers):
                w.writerow([_fmt(t), i, _fmt(x[0]), _fmt(dens[i].sum()),
                            _fmt(dens[i] @ m.bins.pivots)])


GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set xlabel 'x'
set ylabel 'number density'
set terminal pngcairo size 900,600
set output 'profiles.png'
plot for [i=0:{last}] 'profiles.csv' every ::(1+i*{ncell})::((i+1)*{ncell}) using 3:4 with lines title sprintf('t index %d', i)
set output 'pairings.png'
set xlabel 't'
set ylabel 'pairing'
plot for [c=2:{ncols}] 'pairings.csv' using 1:c with lines
"""


def write_gnuplot(path, nknots, ncell, ncols):
    Path(path).write_text(GNUPLOT.format(last=nknots - 1, ncell=ncell, ncols=ncols))


def _fmt(v):
    return repr(float(v))


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest_base(sc, args, command):
    return {"command": command, "scenario": sc.name, "config_hash": sc.config_hash,
            "config": sc.text, "seed": args.seed if args.seed is not None else sc.seed}


def _emit_grid_outputs(out, sc, traj, knots):
    from .measures import dictionary, moment_functionals, write_measure
    mdir = out / "measures"
    mdir.mkdir(exist_ok=True)
    ms = [traj.at(k) for k in knots]
    for i, (k, m) in enumerate(zip(knots, ms)):
        write_measure(mdir / f"c_{i:03d}.txt", m.with_values(m.values, k))
    funcs = moment_functionals(sc.domain) + dictionary(sc.domain)
    write_pairings(out / "pairings.csv", knots, ms, funcs)
    write_profiles(out / "profiles.csv", knots, ms)
    write_gnuplot(out / "plot.gp", len(knots), sc.grid.ncell, len(funcs) + 1)


# -- commands ----------------------------------------------------------------------

def cmd_det_solve(args, sc, out):
    from .det_solver import StepLog, direct_solve
    from .measures import tv_norm
    knots = _knots(args, sc)
    sched = sc.schedule()
    log = StepLog()
    t = time.perf_counter()
    traj = direct_solve(sc.initial, sc.T, sched, sc.inception, log=log)
    wall = time.perf_counter() - t
    _emit_grid_outputs(out, sc, traj, knots)
    man = _manifest_base(sc, args, "det-solve")
    man.update({"dt": sc.dt, "steps": len(traj) - 1, "t0": sched.t0,
                "final_tv": tv_norm(traj.measures[-1]),
                "outflow_number": float(np.sum(log.outflow_number)),
                "outflow_mass": float(np.sum(log.outflow_mass))})
    _dump(out / "manifest.json", man)
    _dump(out / "timing.json", {"wall_seconds": wall})
    print(f"det-solve: {len(traj) - 1} steps, final |c| = {man['final_tv']:.6g}")
    return EXIT_OK


def cmd_picard(args, sc, out):
    from .det_solver import FixedPointConfig, picard_solve
    from .measures import tv_norm
    knots = _knots(args, sc)
    sched = sc.schedule()
    c0_tv = tv_norm(sc.initial)
    cfg = FixedPointConfig.for_positive_data(c0_tv, sc.sup_I, sched.t0, sc.T)
    if "picard_M" in sc.numerics:
        cfg.M = float(sc.numerics["picard_M"])
    t = time.perf_counter()
    res = picard_solve(sc.initial, sc.T, cfg, sched, sc.inception, sup_I=sc.sup_I)
    wall = time.perf_counter() - t
    _emit_grid_outputs(out, sc, res.trajectory, knots)
    man = _manifest_base(sc, args, "picard")
    man.update({"dt": sc.dt, "M": res.M, "tau_M": res.tau_M,
                "windows": [{"start": w.start, "length": w.length, "iterations": w.iterations,
                             "ratio": w.ratio} for w in res.windows]})
    _dump(out / "manifest.json", man)
    _dump(out / "timing.json", {"wall_seconds": wall})
    worst = max(w.ratio for w in res.windows)
    print(f"picard: {len(res.windows)} windows, tau_M = {res.tau_M:.6g}, "
          f"max contraction ratio = {worst:.4g}")
    return EXIT_OK


def cmd_stoch_solve(args, sc, out):
    from .measures import EnsembleMeasure, dictionary, moment_functionals, write_measure
    from .stoch_solver import replica_moments, run_replicas
    knots = _knots(args, sc)
    N = args.N or int(sc.numerics.get("N", 1000))
    R = args.R or int(sc.numerics.get("R", 1))
    seed = args.seed if args.seed is not None else sc.seed
    setup = sc.stochastic_setup()
    t = time.perf_counter()
    results = run_replicas(sc.initial, sc.T, N, R, seed, setup, knots, _workers(args))
    wall = time.perf_counter() - t
    sdir = out / "snapshots"
    sdir.mkdir(exist_ok=True)
    for r, (snaps, *_) in enumerate(results):
        for i, (pos, y) in enumerate(snaps):
            write_measure(sdir / f"r{r:03d}_c_{i:03d}.txt",
                          EnsembleMeasure(pos, y, np.full(y.size, 1.0 / N), knots[i]))
    funcs = moment_functionals(sc.domain) + dictionary(sc.domain)
    if R >= 2:
        mean, err, _ = replica_moments(sc.initial, sc.T, N, R, seed, setup, knots, funcs,
                                       results=results)
        with open(out / "pairings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [h for f in funcs for h in (f.name, f.name + " stderr")])
            for k, tk in enumerate(knots):
                w.writerow([_fmt(tk)] + [_fmt(v) for j in range(len(funcs))
                                         for v in (mean[k, j], err[k, j])])
    _write_exits(out / "exits.csv", results)
    man = _manifest_base(sc, args, "stoch-solve")
    man.update({"N": N, "R": R, "dt": setup.dt,
                "replicas": [{"replica": r, "seed": seed, "spawn_key": [r],
                              "proposals": float(st[0]), "acceptances": float(st[1])}
                             for r, (_, st, _) in enumerate(results)]})
    _dump(out / "manifest.json", man)
    _dump(out / "timing.json", {"wall_seconds": wall, "workers": _workers(args)})
    print(f"stoch-solve: {R} replicas of N={N}")
    return EXIT_OK


def _write_exits(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = max((res[2][1].shape[1] for res in results), default=1)
        w.writerow(["replica", "time"] + [f"x{i}" for i in range(dim)] + ["type_mass"])
        for r, (_, _, (t, x, y)) in enumerate(results):
            for i in np.argsort(t, kind="stable"):
                w.writerow([r, _fmt(t[i])] + [_fmt(v) for v in x[i]] + [_fmt(y[i])])


def cmd_verify(args, sc, out):
    from .verify import CHECKS, run_suite, write_reports
    skip = tuple(s for s in args.skip.split(",") if s)
    only = tuple(s for s in args.only.split(",") if s) or None
    for name in skip + (only or ()):
        if name not in CHECKS:
            raise ConfigError(f"unknown check {name!r}; known: {', '.join(CHECKS)}")
    reports = run_suite(sc, skip=skip, only=only, workers=_workers(args),
                        stoch_N=[int(v) for v in args.stoch_N.split(",")], seed=args.seed,
                        log=print)
    write_reports(out / "report.json", reports)
    failed = [r for r in reports if not r.passed]
    lines = [r.line() for r in reports]
    lines.append(f"{len(reports) - len(failed)}/{len(reports)} passed")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print(lines[-1])
    return EXIT_FAIL if failed else EXIT_OK


def cmd_flow_probe(args, sc, out):
    flow = sc.flow
    t0 = flow.residence_bound()
    b = flow.field.bounds(sc.domain)
    print(f"t0 = {t0:.6g}")
    print(f"speed bound = {b.speed:.6g}, gradient bound = {b.gradient:.6g}, "
          f"divergence bound = {b.divergence:.6g}")
    if out is not None:
        _dump(out / "flow.json", {"t0": t0, "speed": b.speed, "gradient": b.gradient,
                                  "divergence": b.divergence, "dt_max": t0 / 10})
    return EXIT_OK


COMMANDS = {"det-solve": cmd_det_solve, "picard": cmd_picard, "stoch-solve": cmd_stoch_solve,
            "verify": cmd_verify, "flow-probe": cmd_flow_probe}


def main(argv=None):
    args = build_parser().parse_args(argv)
    env = dict(os.environ)
    if args.seed is not None:
        env[ENV_PREFIX + "SEED"] = str(args.seed)
    try:
        sc = load_scenario(args.scenario, env)
        out = None
        if args.command != "flow-probe" or args.out:
            out = _outdir(args, sc)
        return COMMANDS[args.command](args, sc, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DelocoagError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
