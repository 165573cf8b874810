"""Problem specifications and the benchmark problem builder.

A spec is a JSON document with the robot model, the actuation, a contact
phase schedule and cost terms; see ``README.md`` for the schema. Phases are
expanded into running nodes of duration ``dt``; an impulse node is inserted
wherever a phase gains a contact.
"""
import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..model import Problem, Trajectory
from ..rigidbody.dynamics import DynamicsError, contact_positions, recover_torque
from ..rigidbody.model import ContactFrame, ContactSet, ModelSpecError, PlanarModel, actuation_from_dict
from .costs import CostTerm
from .nodes import FORMULATIONS, ForwardDynamicsNode, ImpulseNode, InverseDynamicsNode, RobotTerminal

BUILTIN = ("pend", "quad", "pjump", "walk")


class SpecError(ValueError):
    """A problem specification is malformed or inconsistent."""


def spec_path(name):
    return resources.files("eqddp") / "specs" / f"{name}.json"


def load_spec(name_or_path, overrides=None):
    """Load a built-in spec by name or a spec file by path and apply overrides."""
    text = None
    if name_or_path in BUILTIN:
        text = spec_path(name_or_path).read_text()
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise SpecError(f"unknown problem {name_or_path!r}")
        text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed spec: {exc}") from None
    spec = ProblemSpec.from_dict(raw)
    if overrides:
        spec = spec.with_overrides(**overrides)
    return spec


@dataclass
class Phase:
    duration: float
    contacts: tuple


@dataclass
class ProblemSpec:
    """Validated problem description (see the module docstring)."""

    name: str
    model: dict
    actuation: dict
    dt: float
    formulation: str
    q0: np.ndarray
    v0: np.ndarray
    phases: list
    costs: dict
    friction: float = 0.7
    kp: float = 0.0
    kd: float = 50.0
    travel: float = 0.0
    swing_height: float = 0.1
    steps: dict = field(default_factory=dict)
    waypoints: list = field(default_factory=list)
    mpc: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        try:
            dt = float(d["dt"])
            if "phases" in d:
                phases = [Phase(float(p["duration"]), tuple(p.get("contacts", ()))) for p in d["phases"]]
            else:
                phases = [Phase(int(d["N"]) * dt, ())]
            init = d.get("initial", {})
            model = d["model"]
            nq = _model_nv(model)
            q0 = np.asarray(init.get("q", np.zeros(nq)), dtype=float)
            v0 = np.asarray(init.get("v", np.zeros(nq)), dtype=float)
            swing = d.get("swing", {})
            bg = d.get("baumgarte", {})
            spec = cls(
                name=d.get("name", "problem"), model=model, actuation=d.get("actuation", {"type": "joints"}),
                dt=dt, formulation=d.get("formulation", "condensed"), q0=q0, v0=v0, phases=phases,
                costs=d.get("costs", {}), friction=float(d.get("friction", 0.7)),
                kp=float(bg.get("kp", 0.0)), kd=float(bg.get("kd", 50.0)), travel=float(d.get("travel", 0.0)),
                swing_height=float(swing.get("height", 0.1)), steps=dict(swing.get("step", {})),
                waypoints=list(d.get("waypoints", [])), mpc=dict(d.get("mpc", {})), raw=d,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed spec: {exc}") from None
        spec.validate()
        return spec

    def validate(self):
        if not self.dt > 0:
            raise SpecError("dt must be positive")
        if self.formulation not in FORMULATIONS:
            raise SpecError(f"unknown formulation {self.formulation!r}")
        if not self.phases or any(p.duration <= 0 for p in self.phases):
            raise SpecError("phases need positive durations")
        if self.node_counts()[0] < 1 or sum(self.node_counts()) < 1:
            raise SpecError("horizon needs at least one node")
        if self.q0.shape != self.v0.shape:
            raise SpecError("initial q and v sizes differ")
        for group in ("running", "terminal"):
            for term in self.costs.get(group, []):
                lo, hi = term.get("lower"), term.get("upper")
                if lo is not None and hi is not None and np.any(np.asarray(lo) > np.asarray(hi)):
                    raise SpecError(f"cost {term.get('feature')!r}: bounds must be ordered")

    def node_counts(self):
        return [max(1, int(round(p.duration / self.dt))) for p in self.phases]

    @property
    def N(self):
        return sum(self.node_counts())

    def with_overrides(self, dt=None, N=None, formulation=None, **_):
        spec = copy.copy(self)
        if formulation is not None:
            spec.formulation = formulation
        if dt is not None:
            spec.dt = float(dt)
        if N is not None:
            N = int(N)
            if N < 1:
                raise SpecError("N must be at least 1")
            total = sum(p.duration for p in self.phases)
            spec.dt = total / N
            if len(spec.phases) > 1 and spec.N != N:
                raise SpecError(f"phase durations cannot be split into {N} nodes")
        spec.validate()
        return spec


def _model_nv(model):
    base = 3 if model.get("base", {}).get("type") == "floating" else 0
    return base + len(model.get("links", []))


@dataclass
class NodeSlot:
    """Schedule entry of one node: kind, start time and contact sets."""

    kind: str
    time: float
    active: tuple
    swing: tuple
    phase: int
    phase_progress: float = 0.0


def schedule(spec, model):
    """Expand phases into node slots; impulse slots mark contact gains."""
    swingable = tuple(model.frames)
    slots = []
    t = 0.0
    prev = None
    counts = spec.node_counts()
    for i, (phase, n) in enumerate(zip(spec.phases, counts)):
        for name in phase.contacts:
            if name not in model.frames:
                raise SpecError(f"phase {i}: unknown contact frame {name!r}")
        active = tuple(f for f in swingable if f in phase.contacts)
        swing = tuple(f for f in swingable if f not in phase.contacts)
        if prev is not None and set(active) - set(prev):
            slots.append(NodeSlot("impulse", t, active, swing, i))
        for j in range(n):
            slots.append(NodeSlot("running", t + j * spec.dt, active, swing, i, j / n))
        t += n * spec.dt
        prev = active
    return slots, t


def _quintic(s):
    return 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5


def frame_references(spec, model, slots):
    """Reference position of every frame at every slot.

    Frames stay put while in contact and follow a quintic arc of height
    ``swing_height`` and length ``steps[frame]`` during each swing phase.
    """
    cs = ContactSet([ContactFrame(f.name, f.body, f.offset, 2) for f in model.frames.values()])
    p0 = contact_positions(model, cs, spec.q0).reshape(-1, 2) if cs.nc else np.zeros((0, 2))
    phase_start = {f: np.array([p0[i, 0], 0.0]) for i, f in enumerate(model.frames)}
    refs = []
    last_phase = -1
    for slot in slots:
        if slot.phase != last_phase:
            # frames that swung in the previous phase have landed
            if last_phase >= 0:
                for f in model.frames:
                    if f not in spec.phases[last_phase].contacts:
                        phase_start[f] = phase_start[f] + np.array([spec.steps.get(f, 0.0), 0.0])
            last_phase = slot.phase
        ref = {}
        for f in model.frames:
            p = phase_start[f].copy()
            if f in slot.swing:
                s = slot.phase_progress if slot.kind == "running" else 1.0
                p[0] += spec.steps.get(f, 0.0) * _quintic(s)
                p[1] = spec.swing_height * 64.0 * s ** 3 * (1 - s) ** 3
            ref[f] = p
        refs.append(ref)
    return refs


def _posture_ref(spec, model, t, horizon):
    q = spec.q0.copy()
    if model.floating and horizon > 0:
        q[0] += spec.travel * min(max(t / horizon, 0.0), 1.0)
    return q


def _terms(defs, spec, model, slot, ref_q, frame_refs):
    terms = []
    n = model.nv
    for d in defs:
        feat = d["feature"]
        kind = d.get("kind", "quadratic")
        w = np.asarray(d.get("weight", 1.0), dtype=float)
        if feat == "posture":
            terms.append(CostTerm("q", w, ref=ref_q.copy()))
        elif feat == "swing":
            if slot is None:
                continue
            for f in slot.swing:
                if f in spec.steps or spec.swing_height > 0:
                    terms.append(CostTerm(f"pos:{f}", w, ref=frame_refs[f].copy()))
        elif feat == "cone":
            terms.append(CostTerm("cone", w, kind="barrier", lower=0.0))
        else:
            ref = d.get("ref")
            if isinstance(ref, str):
                raise SpecError(f"cost {feat!r}: unknown reference {ref!r}")
            terms.append(CostTerm(feat, w, kind=kind, ref=None if ref is None else np.asarray(ref, dtype=float),
                                  lower=d.get("lower"), upper=d.get("upper")))
        if terms and terms[-1].feature in ("q", "v") and np.size(terms[-1].weight) not in (1, n):
            raise SpecError(f"cost {feat!r}: weight must have {n} entries")
    return terms


def build_model(spec):
    try:
        model = PlanarModel.from_dict(spec.model)
        actuation = actuation_from_dict(model, spec.actuation)
    except ModelSpecError as exc:
        raise SpecError(str(exc)) from None
    if spec.q0.shape != (model.nv,):
        raise SpecError(f"initial q must have {model.nv} entries")
    return model, actuation


def build_problem(spec, formulation=None):
    """Nodes, terminal cost and schedule metadata for ``spec``."""
    formulation = formulation or spec.formulation
    if formulation not in FORMULATIONS:
        raise SpecError(f"unknown formulation {formulation!r}")
    model, actuation = build_model(spec)
    slots, horizon = schedule(spec, model)
    refs = frame_references(spec, model, slots)
    running = spec.costs.get("running", [])
    impulse_defs = [d for d in spec.costs.get("impulse", [])]
    nodes = []
    for k, slot in enumerate(slots):
        q_ref = _posture_ref(spec, model, slot.time, horizon)
        active = model.contact_set(slot.active, kp=spec.kp, kd=spec.kd)
        if slot.kind == "impulse":
            terms = _terms(impulse_defs, spec, model, slot, q_ref, refs[k])
            # landing placement of the frames that touch down here
            for d in running:
                if d["feature"] == "swing":
                    prev = slots[k - 1]
                    for f in slot.active:
                        if f in prev.swing:
                            terms.append(CostTerm(f"pos:{f}", np.asarray(d.get("weight", 1.0), dtype=float),
                                                  ref=refs[k][f].copy()))
            nodes.append(ImpulseNode(model, active, terms))
            continue
        terms = _terms(running, spec, model, slot, q_ref, refs[k])
        for wp in spec.waypoints:
            if abs(wp["time"] - slot.time) < 0.5 * spec.dt:
                terms.append(CostTerm("q", np.asarray(wp["weight"], dtype=float), ref=np.asarray(wp["q"], dtype=float)))
        if formulation == "forward":
            nodes.append(ForwardDynamicsNode(model, actuation, active, spec.dt, terms, mu=spec.friction))
        else:
            swing = model.contact_set(slot.swing)
            nodes.append(InverseDynamicsNode(model, actuation, active, spec.dt, terms, swing=swing,
                                             formulation=formulation, mu=spec.friction))
    q_end = _posture_ref(spec, model, horizon, horizon)
    terminal = RobotTerminal(model, _terms(spec.costs.get("terminal", []), spec, model, None, q_end, {}))
    x0 = np.concatenate([spec.q0, spec.v0])
    meta = {"spec": spec, "model": model, "actuation": actuation, "slots": slots, "formulation": formulation,
            "horizon": horizon}
    return Problem(x0, nodes, terminal, model.manifold(), name=spec.name, meta=meta)


def quasi_static_control(node, x):
    """Zero acceleration, weight shared by the active contacts, matching efforts."""
    model = node.model
    n = model.nv
    q = x[:n]
    if isinstance(node, ImpulseNode):
        return np.zeros(0)
    contacts = node.contacts
    lam = np.zeros(contacts.nf)
    if contacts.nc:
        share = model.total_mass * model.gravity / contacts.nc
        r = 0
        for f in contacts.frames:
            lam[r + f.dim - 1] = share
            r += f.dim
    try:
        tau = recover_torque(model, node.actuation, contacts, q, np.zeros(n), np.zeros(n), lam)
    except DynamicsError:
        tau = np.zeros(node.actuation.ntau)
    if isinstance(node, ForwardDynamicsNode):
        return tau
    if node.formulation == "condensed":
        return np.concatenate([np.zeros(n), lam])
    return np.concatenate([np.zeros(n), tau, lam, np.zeros(node.ns)])


def initial_guess(problem, rng=None, control_noise=0.0):
    """Constant nominal state with quasi-static controls.

    With ``control_noise`` the controls are replaced by Gaussian samples of
    that scale around the quasi-static ones (random initialization).
    """
    x0 = problem.x0
    controls = []
    for node in problem.nodes:
        u = quasi_static_control(node, x0)
        if control_noise and u.size:
            scale = np.maximum(np.abs(u), 1.0)
            u = u + control_noise * scale * rng.normal(size=u.size)
        controls.append(u)
    return Trajectory([x0.copy() for _ in range(problem.N + 1)], controls)
