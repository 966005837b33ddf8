"""Command-line front end.

Exit codes: 0 success, 1 bad input (config, CSV, IO), 2 solver did not
converge or Monte Carlo verification failed, 3 model precondition violated.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import pipeline
from .auglag import SolverOptions
from .model import ModelError, RatePlan, Schedule, TimeGrid
from .quantize import schedule_from_plan
from .scenarios import ConfigError, build_scenario, load_config
from .simulate import PreconditionError

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_PRECONDITION = 0, 1, 2, 3

log = logging.getLogger("cdkf_sched")


class InputError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} is empty (a header row is required)")
    header, body = rows[0], rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise InputError(f"{path}: malformed numeric data ({exc})") from exc
    return header, data


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _version() -> str:
    try:
        return metadata.version("cdkf-sched")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, args, scenario_name, outputs, started) -> None:
    _write_json(out / "manifest.json", {
        "command": args.command,
        "scenario": scenario_name,
        "config": str(getattr(args, "config", None)),
        "seed": getattr(args, "seed", None),
        "tool_version": _version(),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": sorted(str(p) for p in outputs),
    })


# -- file formats -----------------------------------------------------------

def rates_rows(plan: RatePlan):
    g = plan.grid.nodes
    return [[k, g[k], g[k + 1], *plan.rates[:, k]] for k in range(len(g) - 1)]


def read_rates(path) -> RatePlan:
    header, data = read_csv(path)
    if header[:3] != ["interval", "t_start", "t_end"] or len(header) < 4:
        raise InputError(f"{path}: expected header interval,t_start,t_end,lambda_1,...")
    if data.shape[0] == 0:
        raise InputError(f"{path}: no intervals")
    nodes = np.append(data[:, 1], data[-1, 2])
    if not np.allclose(data[1:, 1], data[:-1, 2], rtol=0, atol=1e-12):
        raise InputError(f"{path}: intervals are not contiguous")
    try:
        return RatePlan(TimeGrid(nodes), data[:, 3:].T)
    except ModelError as exc:
        raise InputError(f"{path}: {exc}") from exc


def read_inputs(path, n_intervals, m_u) -> np.ndarray:
    if path is None:
        return np.zeros((n_intervals, m_u))
    _, data = read_csv(path)
    if data.shape != (n_intervals, 3 + m_u):
        raise InputError(f"{path}: expected {n_intervals} rows with {m_u} input columns")
    return data[:, 3:]


def schedule_rows(schedule: Schedule):
    return [[sid, t] for t, sid in schedule.events()]


def read_schedule(path, n_sensors) -> Schedule:
    if path is None:
        return Schedule.empty(n_sensors)
    header, data = read_csv(path)
    if header != ["sensor", "time"]:
        raise InputError(f"{path}: expected header sensor,time")
    ids = data[:, 0].astype(int) if data.size else np.empty(0, dtype=int)
    if np.any((ids < 1) | (ids > n_sensors)):
        raise InputError(f"{path}: sensor ids must lie in 1..{n_sensors}")
    try:
        return Schedule(tuple(np.sort(data[ids == s + 1, 1]) for s in range(n_sensors)))
    except ModelError as exc:
        raise InputError(f"{path}: {exc}") from exc


# -- commands -----------------------------------------------------------------

def _scenario(args):
    cfg = load_config(args.config)
    scen = build_scenario(cfg, grid_n=args.grid_n)
    return cfg, scen


def _solver_options(scen, args) -> SolverOptions:
    opts = scen.solver_options
    if args.feas_tol is not None:
        opts.feas_tol = args.feas_tol
    if args.opt_tol is not None:
        opts.opt_tol = args.opt_tol
    return opts


def _bound_rows(scen, sol):
    dv = sol.decision
    tr = np.trace(dv.sigma, axis1=1, axis2=2)
    return [[k, t, tr[k], *dv.xi[k], *dv.eps[k]] for k, t in enumerate(scen.grid.nodes)]


def _write_plan(out, scen, sol):
    names = list(scen.aux.names) if scen.aux.names else [f"xi_{i + 1}" for i in range(scen.aux.n_xi)]
    S = len(scen.sensors)
    g = scen.grid.nodes
    paths = [out / "rates.csv", out / "inputs.csv", out / "bound.csv", out / "solve.json"]
    write_csv(paths[0], ["interval", "t_start", "t_end"] + [f"lambda_{s + 1}" for s in range(S)],
              rates_rows(sol.rate_plan))
    write_csv(paths[1], ["interval", "t_start", "t_end"] + [f"u_{i + 1}" for i in range(scen.aux.m_u)],
              [[k, g[k], g[k + 1], *sol.input_plan[k]] for k in range(len(g) - 1)])
    write_csv(paths[2], ["node", "t", "trace"] + names + [f"eps_{i + 1}" for i in range(scen.spec.slack_dim)],
              _bound_rows(scen, sol))
    _write_json(paths[3], sol.diagnostics())
    return paths


def cmd_plan(args, out):
    _, scen = _scenario(args)
    sol = pipeline.plan(scen, _solver_options(scen, args))
    paths = _write_plan(out, scen, sol)
    d = sol.diagnostics()
    print(f"objective {d['objective']:.6g}, max violation {d['max_violation']:.2e}, "
          f"projected gradient {d['projected_gradient']:.2e}, converged={d['converged']}")
    return (EXIT_OK if sol.converged else EXIT_NONCONVERGED), scen.name, paths


def cmd_schedule(args, out):
    plan = read_rates(args.rates)
    sched = schedule_from_plan(plan)
    path = out / "schedule.csv"
    write_csv(path, ["sensor", "time"], schedule_rows(sched))
    print("events per sensor:", sched.counts())
    return EXIT_OK, None, [path]


def cmd_simulate(args, out):
    _, scen = _scenario(args)
    seed = args.seed if args.seed is not None else int(scen.config.get("seed", 0))
    S = len(scen.sensors)
    sched = read_schedule(args.schedule, S)
    if not sched.within(scen.grid):
        raise InputError("schedule has events outside the planning horizon")
    U = read_inputs(args.inputs, len(scen.grid) - 1, scen.aux.m_u)
    truth = pipeline.simulate(scen, sched, U, seed)
    traj, smooth = pipeline.filter_and_smooth(scen, truth)
    n = scen.process.n
    names = list(scen.aux.names) if scen.aux.names else [f"xi_{i + 1}" for i in range(scen.aux.n_xi)]
    paths = [out / "truth.csv", out / "filter.csv", out / "smooth.csv", out / "stats.json"]
    tr = truth.trace()
    write_csv(paths[0], ["t", "event_sensor"] + [f"x_{i + 1}" for i in range(n)] + names + ["trace"],
              [[truth.t[i], truth.event_sensor[i], *truth.x[i], *truth.xi[i], tr[i]] for i in range(truth.t.size)])
    write_csv(paths[1], ["t", "updated", "sensor"] + [f"mu_{i + 1}" for i in range(n)] + ["trace"],
              [[e.time, int(e.event == "updated"), e.sensor or 0, *e.belief.mean, np.trace(e.belief.cov)]
               for e in traj.entries])
    write_csv(paths[2], ["t"] + [f"mean_{i + 1}" for i in range(n)] + ["trace"],
              [[t, *m, np.trace(P)] for t, m, P in zip(smooth.times, smooth.means, smooth.covs)])
    stats = pipeline.evaluate_run(pipeline.run_signals(scen, truth))
    _write_json(paths[3], {k: v.as_dict() for k, v in stats.items()})
    print("events per sensor:", sched.counts())
    return EXIT_OK, scen.name, paths


def cmd_verify(args, out):
    _, scen = _scenario(args)
    seed = args.seed if args.seed is not None else int(scen.config.get("seed", 0))
    plan = read_rates(args.rates)
    if len(plan.grid) != len(scen.grid) or not np.allclose(plan.grid.nodes, scen.grid.nodes):
        raise InputError("rates.csv grid does not match the scenario grid (use --grid-n)")
    U = read_inputs(args.inputs, len(scen.grid) - 1, scen.aux.m_u)
    report = pipeline.verify(scen, plan, U, args.reps, seed)
    path = out / "verify.json"
    _write_json(path, report.to_dict())
    print(f"covariance bound {'PASS' if report.passed else 'FAIL'} over {args.reps} replications; "
          f"worst margin above threshold {float(np.min(report.min_eig - report.cov_threshold)):.3e}")
    return (EXIT_OK if report.passed else EXIT_NONCONVERGED), scen.name, [path]


def cmd_compare(args, out):
    _, scen = _scenario(args)
    seed = args.seed if args.seed is not None else int(scen.config.get("seed", 0))
    sol = pipeline.plan(scen, _solver_options(scen, args))
    paths = _write_plan(out, scen, sol)
    cmp = pipeline.compare_methods(scen, sol, args.reps, seed)
    path = out / "compare.csv"
    write_csv(path, ["method", "signal", "mean", "std", "max", "min"], [list(r) for r in cmp.rows()])
    print(f"{'method':<12} {'signal':<12} {'mean':>12} {'std':>12} {'max':>12}")
    for m, sig, mean, std, mx, _ in cmp.rows():
        print(f"{m:<12} {sig:<12} {mean:12.5g} {std:12.5g} {mx:12.5g}")
    if not sol.converged:
        print("warning: planner returned a best-effort (non-converged) solution", file=sys.stderr)
    return EXIT_OK, scen.name, paths + [path]


def cmd_gp_demo(args, out):
    seed = args.seed if args.seed is not None else 0
    results = [pipeline.gp_demo(kind, n=args.n, seed=seed) for kind in ("exponential", "matern32")]
    path = out / "gp_demo.json"
    _write_json(path, results)
    for r in results:
        print(f"{r['kernel']:<12} mean dev {r['max_mean_deviation']:.3e}  "
              f"variance dev {r['max_variance_deviation']:.3e}")
    return EXIT_OK, None, [path]


COMMANDS = {
    "plan": cmd_plan,
    "schedule": cmd_schedule,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "gp-demo": cmd_gp_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdkf-sched", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help="scenario config file, or the name of a shipped config (robot, water, ...)")
            sp.add_argument("--grid-n", type=int, default=None, help="override the number of grid nodes")
        sp.add_argument("--out", default=".", help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: the config's seed)")

    def tolerances(sp):
        sp.add_argument("--feas-tol", type=float, default=None)
        sp.add_argument("--opt-tol", type=float, default=None)

    sp = sub.add_parser("plan", help="solve the rate-scheduling problem")
    common(sp)
    tolerances(sp)
    sp = sub.add_parser("schedule", help="turn a rate plan into deterministic measurement times")
    common(sp, config=False)
    sp.add_argument("--rates", required=True)
    sp = sub.add_parser("simulate", help="simulate the truth, run the filter and the smoother")
    common(sp)
    sp.add_argument("--schedule", default=None, help="schedule.csv (default: no measurements)")
    sp.add_argument("--inputs", default=None, help="inputs.csv (default: zero inputs)")
    sp = sub.add_parser("verify", help="Monte Carlo check of the covariance and auxiliary bounds")
    common(sp)
    sp.add_argument("--rates", required=True)
    sp.add_argument("--inputs", default=None)
    sp.add_argument("--reps", type=int, default=2000)
    sp = sub.add_parser("compare", help="compare Optimized, M-Optimized, Greedy and Random schedules")
    common(sp)
    tolerances(sp)
    sp.add_argument("--reps", type=int, default=20)
    sp = sub.add_parser("gp-demo", help="state-space smoother versus dense GP regression")
    common(sp, config=False)
    sp.add_argument("--n", type=int, default=15, help="number of measurements")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s",
                        level=logging.DEBUG if args.verbose else logging.WARNING)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        code, name, paths = COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as exc:
        print(f"precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    write_manifest(out, args, name, paths, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
