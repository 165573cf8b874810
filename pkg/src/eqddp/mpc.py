"""Receding-horizon control on top of the condensed inverse-dynamics solver.

Each control tick shifts the previous solution, replaces the initial state
with the plant estimate, runs a fixed number of solver iterations and maps
the first-node policy to joint efforts. The plant integrates contact forward
dynamics at a finer step; lift-offs follow the schedule, touchdowns follow
the ground.
"""
import copy
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import Problem, Trajectory
from .problems.builder import ProblemSpec, SpecError, build_problem, initial_guess, quasi_static_control
from .rigidbody.dynamics import (DynamicsError, contact_forward_dynamics, contact_positions, contact_velocities, evaluate,
                                 impulse_dynamics, recover_torque)
from .solver import SolverSettings, SolverState, solve

DIVERGENCE_BOUND = 1e3


class MpcError(ValueError):
    """The MPC configuration or disturbance schedule is invalid."""


@dataclass
class Disturbance:
    """Generalized impulse on the base coordinates ``(x, z, pitch)`` at ``time``."""

    time: float
    impulse: np.ndarray


@dataclass
class MpcConfig:
    horizon: int
    dt: float
    control_period: float
    duration: float
    plant_dt: float
    iterations: int = 1
    disturbances: list = field(default_factory=list)
    feedback: bool = True
    state_feedback: bool = False
    warm_start: bool = True
    state_noise: float = 0.0
    seed: int = 0
    initial_iterations: int = 200

    def __post_init__(self):
        if self.horizon < 1:
            raise MpcError("horizon needs at least one node")
        if not self.dt > 0 or not self.plant_dt > 0 or not self.duration > 0:
            raise MpcError("dt, plant_dt and duration must be positive")
        if not 0 < self.control_period <= self.dt + 1e-12:
            raise MpcError("control period must lie in (0, dt]")
        ratio = self.dt / self.control_period
        if abs(ratio - round(ratio)) > 1e-9:
            raise MpcError("dt must be a whole multiple of the control period")
        steps = self.control_period / self.plant_dt
        if abs(steps - round(steps)) > 1e-9:
            raise MpcError("control period must be a whole multiple of plant_dt")
        if self.iterations < 1:
            raise MpcError("iteration budget must be at least 1")

    @classmethod
    def from_spec(cls, spec, **overrides):
        """Read the ``mpc`` block of a problem spec."""
        m = spec.mpc
        if not m:
            raise MpcError(f"spec {spec.name!r} has no mpc block")
        try:
            dist = []
            for d in m.get("disturbances", []):
                imp = np.asarray(d["impulse"], dtype=float)
                if imp.shape != (3,):
                    raise MpcError("disturbance impulse needs 3 entries (x, z, pitch)")
                dist.append(Disturbance(float(d["time"]), imp))
            dt = float(m.get("dt", spec.dt))
            kw = dict(horizon=int(m["horizon"]), dt=dt, control_period=float(m.get("control_period", dt)),
                      duration=float(m["duration"]), plant_dt=float(m.get("plant_dt", 0.001)),
                      iterations=int(m.get("iterations", 1)), disturbances=dist)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MpcError):
                raise
            raise MpcError(f"malformed mpc block: {exc}") from None
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TorquePolicy:
    """Effort policy ``tau(x) = pi_tau + (Pi_tau + Pi_state) (x_ref (-) x)`` around ``x_ref``.

    ``Pi_tau`` carries the acceleration and force gains mapped through
    ``M`` and ``J'``; ``Pi_state`` is the sensitivity of the inverse
    dynamics to the state at fixed ``(a, lam)`` and is zero unless requested.
    """

    pi_tau: np.ndarray
    Pi_tau: np.ndarray
    q_ref: np.ndarray
    v_ref: np.ndarray
    Pi_state: np.ndarray = None

    def __post_init__(self):
        if self.Pi_state is None:
            self.Pi_state = np.zeros_like(self.Pi_tau)

    @property
    def gain(self):
        return self.Pi_tau + self.Pi_state

    def __call__(self, x, manifold=None, x_ref=None):
        ref = np.concatenate([self.q_ref, self.v_ref]) if x_ref is None else x_ref
        dx = ref - x if manifold is None else manifold.difference(ref, x)
        return self.pi_tau + self.gain @ dx


def map_policy_to_torque(model, actuation, contacts, q, v, feedforward, gain, state_terms=False):
    """Joint-effort policy from a condensed node policy.

    ``feedforward`` is the optimal control ``(a, lam)`` of the node and
    ``gain`` its feedback matrix with rows split the same way. The efforts
    reproduce the actuated rows of the inverse dynamics at the optimum;
    the gain maps ``(Pi_a, Pi_lam)`` through ``M`` and ``J'``. With
    ``state_terms`` the policy also gets ``-dtau/dx`` so that the total gain
    is the full linearization of the inverse dynamics.
    """
    n, nf = model.nv, contacts.nf
    A = actuation.matrix(q)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * sv[0]:
        raise DynamicsError("effort map is ill-conditioned")
    a, lam = feedforward[:n], feedforward[n:n + nf]
    pi_tau = recover_torque(model, actuation, contacts, q, v, a, lam)
    pt = evaluate(model, q, v, a, contacts, lam)
    P = actuation.pinv(q)
    Pi_a, Pi_lam = gain[:n], gain[n:n + nf]
    Pi_tau = P @ (pt.M @ Pi_a - pt.J.T @ Pi_lam)
    Pi_state = None
    if state_terms:
        _, dq, dv, _, _ = recover_torque(model, actuation, contacts, q, v, a, lam, derivatives=True)
        Pi_state = -np.hstack([dq, dv])
    return TorquePolicy(pi_tau, Pi_tau, np.array(q, dtype=float), np.array(v, dtype=float), Pi_state)


# ---------------------------------------------------------------------------
# schedule

def periodic_spec(spec, duration):
    """Copy of ``spec`` whose ``mpc.phases`` repeat until ``duration`` is covered."""
    m = spec.mpc
    raw = m.get("phases")
    if not raw:
        raise MpcError("mpc block needs a phase cycle")
    cycle = [(float(p["duration"]), tuple(p.get("contacts", ()))) for p in raw]
    period = sum(d for d, _ in cycle)
    if period <= 0:
        raise MpcError("phase cycle needs a positive duration")
    d = copy.deepcopy(spec.raw)
    d["phases"] = [{"duration": dur, "contacts": list(c)}
                   for _ in range(int(math.ceil(duration / period)) + 1) for dur, c in cycle]
    d["travel"] = float(m.get("travel", 0.0))
    for key in ("initial", "swing", "costs", "baumgarte"):
        if key in m:
            d[key] = copy.deepcopy(m[key])
    d.pop("mpc", None)
    try:
        out = ProblemSpec.from_dict(d)
    except SpecError as exc:
        raise MpcError(str(exc)) from None
    out.mpc = m
    return out


class Timeline:
    """All node models of the periodic schedule, windowed per control tick."""

    def __init__(self, spec, config):
        total = config.duration + (config.horizon + 2) * config.dt
        self.spec = periodic_spec(spec, total)
        self.spec.dt = config.dt
        self.problem = build_problem(self.spec, "condensed")
        self.slots = self.problem.meta["slots"]
        self.model = self.problem.meta["model"]
        self.actuation = self.problem.meta["actuation"]
        self.horizon = config.horizon

    def start_index(self, t):
        """Running slot covering ``t``; a touchdown exactly at ``t`` is applied by the plant."""
        found = None
        for i, s in enumerate(self.slots):
            if s.kind != "running":
                continue
            if s.time > t + 1e-9:
                break
            found = i
        if found is None or found + self.horizon > len(self.slots):
            raise MpcError("simulation ran past the schedule")
        return found

    def window(self, start, x0):
        nodes = self.problem.nodes[start:start + self.horizon]
        if len(nodes) < self.horizon:
            raise MpcError("simulation ran past the schedule")
        return Problem(np.asarray(x0, dtype=float), list(nodes), self.problem.terminal, self.problem.manifold,
                       name=self.problem.name, meta={"start": start})

    def active_contacts(self, t):
        """Contact names scheduled at time ``t`` (the slot covering ``t``)."""
        current = self.slots[0].active
        for s in self.slots:
            if s.kind != "running":
                continue
            if s.time > t + 1e-9:
                break
            current = s.active
        return current


def warm_start_shift(problem, previous, shift, x_estimate):
    """Shift ``previous`` by ``shift`` nodes onto ``problem`` and attach the estimate.

    Nodes that enter the window repeat the last state; their controls repeat
    the last control when the dimensions agree and fall back to the
    quasi-static control otherwise. The stored first state is kept, so the
    mismatch with ``x_estimate`` appears as the initial gap.
    """
    N = problem.N
    states = [s.copy() for s in previous.states[shift:]][:N + 1]
    controls = list(previous.controls[shift:])
    out = []
    for k in range(N):
        node = problem.nodes[k]
        u = controls[k] if k < len(controls) else None
        if u is None or u.shape != (node.nu,):
            prev = out[-1] if out else None
            if prev is not None and prev.shape == (node.nu,) and k >= len(controls):
                u = prev.copy()
            else:
                u = quasi_static_control(node, states[k]) if node.nu else np.zeros(0)
        out.append(np.array(u, dtype=float))
        if k + 1 >= len(states):
            # entering node: rolled out from the last state so its defect starts closed
            try:
                nxt = node.calc(states[k], out[k]).x_next
            except (ValueError, DynamicsError, np.linalg.LinAlgError):
                nxt = states[k]
            states.append(np.array(nxt, dtype=float) if np.all(np.isfinite(nxt)) else states[k].copy())
    return problem.with_initial_state(np.asarray(x_estimate, dtype=float)), Trajectory(states, out)


# ---------------------------------------------------------------------------
# plant

class Plant:
    """Contact forward dynamics with inelastic touchdowns on flat ground.

    A foot in contact holds until the schedule lifts it. A free foot lands
    when it reaches the ground moving down, whether or not the schedule
    expects it, so a failed take-off or an early landing stays physical.
    """

    def __init__(self, model, actuation, spec, dt):
        self.model = model
        self.actuation = actuation
        self.spec = spec
        self.dt = dt
        self._sets = {}
        self.active = ()

    def contacts(self, names):
        key = tuple(names)
        if key not in self._sets:
            self._sets[key] = self.model.contact_set(key, kp=self.spec.kp, kd=self.spec.kd)
        return self._sets[key]

    def foot_height(self, x, name):
        """Height and vertical velocity of contact ``name``."""
        n = self.model.nv
        cs = self.contacts((name,))
        return (float(contact_positions(self.model, cs, x[:n])[-1]),
                float(contact_velocities(self.model, cs, x[:n], x[n:])[-1]))

    def update_contacts(self, x, scheduled, candidates):
        """Apply lift-offs from ``scheduled`` and ground touchdowns; returns the new state."""
        keep = [c for c in self.active if c in scheduled]
        landing = []
        for name in candidates:
            if name in keep:
                continue
            z, vz = self.foot_height(x, name)
            if z <= 0.0 and vz < 0.0:
                landing.append(name)
        names = tuple(c for c in candidates if c in keep or c in landing)
        if landing:
            x = self.touchdown(x, names)
        self.active = names
        return x

    def touchdown(self, x, names):
        n = self.model.nv
        vp, _ = impulse_dynamics(self.model, self.contacts(names), x[:n], x[n:])
        return np.concatenate([x[:n], vp])

    def push(self, x, names, impulse):
        """Apply a generalized base impulse, respecting the active contacts."""
        n = self.model.nv
        p = np.zeros(n)
        p[:3] = impulse
        M = evaluate(self.model, x[:n], np.zeros(n), np.zeros(n), gravity=False).M
        v = x[n:] + np.linalg.solve(M, p)
        if names:
            v, _ = impulse_dynamics(self.model, self.contacts(names), x[:n], v)
        return np.concatenate([x[:n], v])

    def step(self, x, tau, names):
        n = self.model.nv
        q, v = x[:n], x[n:]
        gen = self.actuation.matrix(q) @ tau
        a, _ = contact_forward_dynamics(self.model, self.contacts(names), q, v, gen)
        v_next = v + self.dt * a
        return self.model.manifold().normalize(np.concatenate([q + self.dt * v_next, v_next]))


# ---------------------------------------------------------------------------
# closed loop

TRACE_FIELDS = ("t", "mpc_cost", "gap_l1", "constraint_l1", "iterations", "solve_time")


@dataclass
class MpcTrace:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    torques: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    gap_l1: list = field(default_factory=list)
    constraint_l1: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    model: object = None

    def columns(self):
        n = self.model.nv
        nt = len(self.torques[0]) if self.torques else 0
        names = self.model.joint_names if len(self.model.joint_names) == n else [f"q{i}" for i in range(n)]
        return (["t"] + [f"q_{s}" for s in names] + [f"v_{s}" for s in names] + [f"tau{i}" for i in range(nt)]
                + ["mpc_cost", "gap_l1", "constraint_l1", "iterations", "solve_time"])

    def rows(self):
        for i, t in enumerate(self.times):
            yield ([t] + list(self.states[i]) + list(self.torques[i])
                   + [self.costs[i], self.gap_l1[i], self.constraint_l1[i], self.iterations[i], self.solve_times[i]])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.rows():
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])

    def pitch_excursion(self, t_from=0.0, reference=0.0):
        """Largest ``|pitch - reference|`` of the floating base from ``t_from`` on."""
        vals = [abs(s[2] - reference) for t, s in zip(self.times, self.states) if t >= t_from - 1e-12]
        return max(vals) if vals else 0.0


def closed_loop_simulate(spec, config, settings=None, callback=None):
    """Run the MPC against the plant for ``config.duration`` seconds.

    Returns an :class:`MpcTrace`; a diverging plant truncates the trace and
    sets ``diverged``.
    """
    settings = settings or SolverSettings(threads=1)
    timeline = Timeline(spec, config)
    model, actuation = timeline.model, timeline.actuation
    if not model.floating:
        raise MpcError("closed-loop simulation needs a floating-base model")
    plant = Plant(model, actuation, timeline.spec, config.plant_dt)
    manifold = timeline.problem.manifold
    rng = np.random.default_rng(config.seed)
    x = np.concatenate([timeline.spec.q0, timeline.spec.v0])
    trace = MpcTrace(model=model)

    ticks = int(round(config.duration / config.control_period))
    sub = int(round(config.control_period / config.plant_dt))
    pending = sorted(config.disturbances, key=lambda d: d.time)
    feet = tuple(model.frames)
    plant.active = tuple(timeline.active_contacts(0.0))

    start = timeline.start_index(0.0)
    problem = timeline.window(start, x)
    guess = initial_guess(problem)
    first = copy.copy(settings)
    first.max_iters = config.initial_iterations
    sol = solve(problem, guess, first)
    prev_start = start
    for tick in range(ticks + 1):
        t = tick * config.control_period
        if tick:
            start = timeline.start_index(t)
            x_est = x + config.state_noise * rng.normal(size=x.size) if config.state_noise else x
            problem = timeline.window(start, x_est)
            if config.warm_start:
                problem, guess = warm_start_shift(problem, sol.trajectory, start - prev_start, x_est)
                state = SolverState(mu=sol.state.mu, nu=settings.nu0)
            else:
                guess, state = initial_guess(problem), None
            step = copy.copy(settings)
            step.max_iters = config.iterations
            t0 = time.perf_counter()
            try:
                sol = solve(problem, guess, step, state=state)
            except (ValueError, RuntimeError, DynamicsError) as exc:
                trace.diverged, trace.message = True, f"solver failure at t={t:.3f}: {exc}"
                break
            solve_time = time.perf_counter() - t0
            prev_start = start
        else:
            solve_time = 0.0
        node = problem.nodes[0]
        traj = sol.trajectory
        n = model.nv
        x_ref = traj.states[0]
        if sol.policies is None:
            trace.diverged, trace.message = True, f"no policy at t={t:.3f}"
            break
        try:
            pol = map_policy_to_torque(model, actuation, node.contacts, x_ref[:n], x_ref[n:], traj.controls[0],
                                       sol.policies[0].Pi, state_terms=config.state_feedback)
        except DynamicsError as exc:
            trace.diverged, trace.message = True, f"policy mapping failed at t={t:.3f}: {exc}"
            break
        if not config.feedback:
            pol.Pi_tau = np.zeros_like(pol.Pi_tau)
            pol.Pi_state = np.zeros_like(pol.Pi_state)
        ev = sol.evaluation
        trace.times.append(t)
        trace.states.append(x.copy())
        trace.torques.append(pol(x, manifold))
        trace.costs.append(float(ev.total_cost))
        trace.gap_l1.append(float(ev.gap_l1))
        trace.constraint_l1.append(float(ev.constraint_l1))
        trace.iterations.append(int(sol.iterations))
        trace.solve_times.append(float(solve_time))
        if callback is not None:
            callback(trace)
        if tick == ticks:
            break
        # reference moves along the planned first interval
        x_next = traj.states[1] if len(traj.states) > 1 else x_ref
        try:
            for j in range(sub):
                tj = t + j * config.plant_dt
                x = plant.update_contacts(x, timeline.active_contacts(tj), feet)
                while pending and pending[0].time <= tj + 1e-12:
                    x = plant.push(x, plant.active, pending.pop(0).impulse)
                s = min((tj - timeline.slots[start].time) / config.dt, 1.0)
                ref = manifold.integrate(x_ref, s * manifold.difference(x_next, x_ref))
                tau = pol(x, manifold, ref)
                x = plant.step(x, tau, plant.active)
                if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_BOUND:
                    raise FloatingPointError
        except (FloatingPointError, DynamicsError, np.linalg.LinAlgError):
            trace.diverged, trace.message = True, f"plant diverged near t={t:.3f}"
            break
    if not trace.diverged:
        trace.message = "completed"
    return trace

