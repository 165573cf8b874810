"""Repeated-trial timing of solver variants on one problem."""
import statistics
import time
from dataclasses import dataclass, field, replace

from .solver import SolverSettings, solve

COST_RTOL = 1e-6
STAGES = ("derivatives", "backward", "forward")


@dataclass
class BenchRow:
    problem: str
    formulation: str
    factorization: str
    trials: int
    mean: float = float("nan")
    std: float = float("nan")
    iterations: int = -1
    cost: float = float("nan")
    converged: bool = False
    flagged: bool = False
    note: str = ""
    stages: dict = field(default_factory=dict)

    def as_dict(self):
        d = {k: getattr(self, k) for k in ("problem", "formulation", "factorization", "trials", "mean", "std",
                                           "iterations", "cost", "converged", "flagged", "note")}
        for s in STAGES:
            d[f"t_{s}"] = self.stages.get(s, float("nan"))
        return d


BENCH_FIELDS = tuple(BenchRow("", "", "", 0).as_dict())


def time_variant(build, formulation, factorization, trials, settings=None, name="problem"):
    """Time ``trials`` solves of ``build(formulation)`` after one warm-up solve.

    ``build`` returns ``(problem, initial_guess)`` and must be deterministic so
    that every trial starts from the same trajectory.
    """
    settings = replace(settings or SolverSettings(), factorization=factorization)
    row = BenchRow(name, formulation, factorization, trials)
    problem, guess = build(formulation)
    warm = solve(problem, guess, settings)
    row.converged = warm.converged
    row.iterations = warm.iterations
    row.cost = float(warm.cost)
    if not warm.converged:
        row.flagged, row.note = True, f"did not converge: {warm.message}"
        return row
    times = []
    stages = {s: 0.0 for s in STAGES}
    for _ in range(trials):
        problem, guess = build(formulation)
        t0 = time.perf_counter()
        sol = solve(problem, guess, settings)
        times.append(time.perf_counter() - t0)
        for rec in sol.state.log:
            stages["derivatives"] += rec.t_derivatives
            stages["backward"] += rec.t_backward
            stages["forward"] += rec.t_forward
    row.mean = statistics.fmean(times) if times else float("nan")
    row.std = statistics.stdev(times) if len(times) > 1 else 0.0
    row.stages = {s: v / max(trials, 1) for s, v in stages.items()}
    return row


def flag_cost_disagreement(rows, rtol=COST_RTOL):
    """Flag converged rows whose cost differs from the first converged one.

    Flagged rows keep their cost for inspection but lose their timings.
    """
    ref = next((r.cost for r in rows if r.converged and not r.flagged), None)
    if ref is None:
        return rows
    for r in rows:
        if r.flagged:
            continue
        if abs(r.cost - ref) > rtol * max(1.0, abs(ref)):
            r.flagged = True
            r.note = f"cost {r.cost:.12g} differs from {ref:.12g}"
        if r.flagged:
            r.mean = r.std = float("nan")
    return rows


def bench(build, formulations, factorizations, trials=50, settings=None, name="problem"):
    """All ``formulation x factorization`` rows for one problem."""
    rows = [time_variant(build, f, z, trials, settings, name) for f in formulations for z in factorizations]
    for r in rows:
        if r.flagged:
            r.mean = r.std = float("nan")
    return flag_cost_disagreement(rows)
