"""Command-line entry points: ``eqddp solve | mpc | bench``.

Exit codes: 0 success, 1 error (bad spec, bad flags, I/O), 2 solve did not
converge, 3 the closed-loop plant diverged. Artifacts go to ``--out``, which
defaults to ``$EQDDP_OUTPUT_DIR`` or ``./eqddp-out``.
"""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bench import BENCH_FIELDS, bench
from .mpc import MpcConfig, MpcError, closed_loop_simulate
from .problems import BUILTIN, SpecError, build_problem, initial_guess, load_spec
from .problems.nodes import FORMULATIONS
from .solver import FACTORIZATIONS, SolverSettings, default_threads, kkt_residual, solve

log = logging.getLogger("eqddp")

OUTPUT_ENV = "EQDDP_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_DIVERGED = 0, 1, 2, 3

LOG_FIELDS = ("iter", "cost", "gap_l1", "constraint_l1", "alpha", "mu", "nu", "metric", "expected_dl1", "gap_inf")


class CliError(Exception):
    pass


def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def _cell(v):
    # repr keeps full precision, so identical runs give identical files
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_table(path, fields, rows, fmt):
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps([{k: _num(r[k]) if not isinstance(r[k], str) else r[k] for k in fields}
                                    for r in rows], indent=1) + "\n")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r[k]) for k in fields])
    return path


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def output_dir(args):
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "eqddp-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def settings_from(args, **extra):
    kw = dict(tol=args.tol, max_iters=args.max_iters, basis_method=args.basis_method, threads=args.threads)
    if isinstance(args.factorization, str):
        kw["factorization"] = args.factorization
    kw.update(extra)
    try:
        return SolverSettings(**kw)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def spec_from(args, problem=None):
    overrides = {k: getattr(args, k) for k in ("dt", "N") if getattr(args, k, None) is not None}
    if isinstance(getattr(args, "formulation", None), str):
        overrides["formulation"] = args.formulation
    return load_spec(problem or args.problem, overrides)


def _guess(problem, args):
    if args.init_noise:
        return initial_guess(problem, np.random.default_rng(args.seed), args.init_noise)
    return initial_guess(problem)


# ---------------------------------------------------------------------------
# commands

def cmd_solve(args):
    spec = spec_from(args)
    problem = build_problem(spec)
    settings = settings_from(args)
    sol = solve(problem, _guess(problem, args), settings)
    out = output_dir(args)
    ext = args.format
    write_table(out / f"log.{ext}", LOG_FIELDS, [r.as_dict() for r in sol.state.log], ext)
    traj = sol.trajectory
    nu_max = max((u.size for u in traj.controls), default=0)
    nx = traj.states[0].size
    fields = ("k",) + tuple(f"x{i}" for i in range(nx)) + tuple(f"u{i}" for i in range(nu_max))
    rows = []
    for k, x in enumerate(traj.states):
        u = traj.controls[k] if k < len(traj.controls) else np.zeros(0)
        row = {"k": k, **{f"x{i}": float(x[i]) for i in range(nx)}}
        row.update({f"u{i}": float(u[i]) if i < u.size else float("nan") for i in range(nu_max)})
        rows.append(row)
    write_table(out / f"trajectory.{ext}", fields, rows, ext)
    kkt = kkt_residual(problem, traj)
    summary = {
        "problem": spec.name, "formulation": spec.formulation, "factorization": settings.factorization,
        "converged": bool(sol.converged), "iterations": sol.iterations, "cost": float(sol.cost),
        "constraint_l1": float(sol.evaluation.constraint_l1), "gap_l1": float(sol.evaluation.gap_l1),
        "metric": float(sol.metric), "message": sol.message,
        "kkt_stationarity": float(kkt["stationarity"]), "kkt_feasibility": float(kkt["feasibility"]),
        "kkt_scale": float(kkt["scale"]),
    }
    write_json(out / "summary.json", summary)
    print(f"{spec.name}: {'converged' if sol.converged else 'not converged'} after {sol.iterations} iterations, "
          f"cost {sol.cost:.10g}, |h|_1 {summary['constraint_l1']:.3e}, metric {sol.metric:.3e}")
    return EXIT_OK if sol.converged else EXIT_NOT_CONVERGED


def cmd_mpc(args):
    spec = spec_from(args)
    overrides = {"feedback": not args.no_feedback, "state_feedback": args.state_feedback, "seed": args.seed}
    for key in ("duration", "iterations", "horizon", "state_noise"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    config = MpcConfig.from_spec(spec, **overrides)
    trace = closed_loop_simulate(spec, config, settings_from(args))
    out = output_dir(args)
    fields = tuple(trace.columns())
    rows = [dict(zip(fields, r)) for r in trace.rows()]
    write_table(out / f"trace.{args.format}", fields, rows, args.format)
    write_json(out / "mpc_summary.json", {
        "problem": spec.name, "completed": not trace.diverged, "message": trace.message,
        "ticks": len(trace.times), "pitch_excursion": trace.pitch_excursion() if trace.times else 0.0,
        "feedback": config.feedback, "duration": config.duration,
    })
    print(f"{spec.name} mpc: {trace.message} ({len(trace.times)} ticks)")
    return EXIT_DIVERGED if trace.diverged else EXIT_OK


def cmd_bench(args):
    if args.threads == 1:
        log.warning("running single-threaded: the parallel derivative stage gives no advantage, "
                    "so factorization timings reflect the serial cost only")
    problems = args.problem or list(BUILTIN)
    formulations = args.formulation or ["condensed", "redundant"]
    factorizations = args.factorization or list(FACTORIZATIONS)
    settings = settings_from(args, factorization=factorizations[0])
    rows = []
    for name in problems:
        spec = spec_from(args, name)

        def build(form, spec=spec):
            problem = build_problem(spec, form)
            return problem, _guess(problem, args)

        rows.extend(bench(build, formulations, factorizations, args.trials, settings, spec.name))
    out = output_dir(args)
    write_table(out / f"bench.{args.format}", BENCH_FIELDS, [r.as_dict() for r in rows], args.format)
    print(f"{'problem':<8} {'formulation':<10} {'factorization':<10} {'mean[s]':>9} {'std[s]':>9} {'iters':>5}  note")
    for r in rows:
        print(f"{r.problem:<8} {r.formulation:<10} {r.factorization:<10} {r.mean:9.4f} {r.std:9.4f} "
              f"{r.iterations:5d}  {r.note}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dt", type=float, help="node duration override")
    common.add_argument("--N", type=_positive_int, help="node count override (keeps the total duration)")
    common.add_argument("--tol", type=float, default=1e-9)
    common.add_argument("--max-iters", type=int, default=200)
    common.add_argument("--basis-method", default="lu-full-pivot", choices=("lu-full-pivot", "qr-col-pivot"))
    common.add_argument("--threads", type=_positive_int, default=default_threads(),
                        help="workers for the derivative stage (default: cores, at most 8)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--init-noise", type=float, default=0.0,
                        help="scale of Gaussian noise on the initial controls")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./eqddp-out)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eqddp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve one problem")
    p.add_argument("--problem", required=True, help=f"built-in name ({', '.join(BUILTIN)}) or spec path")
    p.add_argument("--formulation", choices=FORMULATIONS)
    p.add_argument("--factorization", choices=FACTORIZATIONS, default="nullspace")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("mpc", parents=[common], help="closed-loop MPC simulation")
    p.add_argument("--problem", default="pjump")
    p.add_argument("--formulation", choices=("condensed",))
    p.add_argument("--factorization", choices=FACTORIZATIONS, default="nullspace")
    p.add_argument("--duration", type=float)
    p.add_argument("--iterations", type=_positive_int, help="solver iterations per control tick")
    p.add_argument("--horizon", type=_positive_int)
    p.add_argument("--state-noise", type=float)
    p.add_argument("--no-feedback", action="store_true", help="apply feed-forward efforts only")
    p.add_argument("--state-feedback", action="store_true", help="add the state sensitivity of the efforts")
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("bench", parents=[common], help="time formulation x factorization variants")
    p.add_argument("--problem", action="append", help="repeatable; default: all built-in problems")
    p.add_argument("--formulation", action="append", choices=FORMULATIONS)
    p.add_argument("--factorization", action="append", choices=FACTORIZATIONS)
    p.add_argument("--trials", type=_positive_int, default=50)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, SpecError, MpcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
