"""Numba kernels vs the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from EQDDP_DISABLE_NUMBA. Usage:

    python3 benchmarks/kernels.py            # both backends, side by side
    python3 benchmarks/kernels.py --worker   # one backend, JSON on stdout
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best_of(fn, repeat, number):
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def worker(repeat, solve_trials):
    from eqddp import _riccati
    from eqddp._accel import backend_name
    from eqddp.problems import build_problem, initial_guess, load_spec
    from eqddp.rigidbody.dynamics import evaluate
    from eqddp.solver import SolverSettings, solve

    rng = np.random.default_rng(0)
    spec = load_spec("walk")
    problem = build_problem(spec, "redundant")
    model = problem.meta["model"]
    node = problem.nodes[0]
    n = model.nv
    q, v, a = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    lam = rng.normal(size=node.contacts.nf)

    nx, nu, nh = 2 * n, node.nu, node.nh
    hu = rng.normal(size=(nh, nu))
    hx = rng.normal(size=(nh, nx))
    hg = rng.normal(size=nh)
    W = rng.normal(size=(nx + nu, nx + nu))
    W = W @ W.T + np.eye(nx + nu)
    Qu, Qux, Quu = rng.normal(size=nu), W[nx:, :nx].copy(), W[nx:, nx:].copy()
    Y, Z, psi_h, psi_hx, _, _ = _riccati.nullspace_precompute(hu, hx, hg, 0)

    cases = {
        "rnea+derivatives": lambda: evaluate(model, q, v, a, node.contacts, lam),
        "nullspace_precompute": lambda: _riccati.nullspace_precompute(hu, hx, hg, 0),
        "nullspace_policy": lambda: _riccati.nullspace_policy(Qu, Qux, Quu, Z, psi_h, psi_hx),
        "schur_policy": lambda: _riccati.schur_policy(Qu, Qux, Quu, hx, hu, hg),
    }
    out = {"backend": backend_name(), "per_call": {}}
    for name, fn in cases.items():
        out["per_call"][name] = _best_of(fn, repeat, 200)

    pj = build_problem(load_spec("pjump"))
    settings = SolverSettings(threads=1)
    solve(pj, initial_guess(pj), settings)
    times = []
    for _ in range(solve_trials):
        t0 = time.perf_counter()
        solve(pj, initial_guess(pj), settings)
        times.append(time.perf_counter() - t0)
    out["per_call"]["pjump solve"] = min(times)
    return out


def run_backend(disable, repeat, solve_trials):
    env = dict(os.environ)
    if disable:
        env["EQDDP_DISABLE_NUMBA"] = "1"
    else:
        env.pop("EQDDP_DISABLE_NUMBA", None)
    cmd = [sys.executable, __file__, "--worker", "--repeat", str(repeat), "--solve-trials", str(solve_trials)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--worker", action="store_true")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--solve-trials", type=int, default=3)
    args = p.parse_args(argv)
    if args.worker:
        print(json.dumps(worker(args.repeat, args.solve_trials)))
        return 0
    fast = run_backend(False, args.repeat, args.solve_trials)
    slow = run_backend(True, args.repeat, args.solve_trials)
    print(f"{'kernel':<22} {fast['backend']:>12} {slow['backend']:>12} {'speed-up':>9}")
    for name, t_fast in fast["per_call"].items():
        t_slow = slow["per_call"][name]
        print(f"{name:<22} {t_fast * 1e6:10.1f}us {t_slow * 1e6:10.1f}us {t_slow / t_fast:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
