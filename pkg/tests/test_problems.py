import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqddp.model import evaluate_trajectory
from eqddp.problems import (BUILTIN, ImpulseNode, InverseDynamicsNode, SpecError, barrier_cost, build_problem,
                            friction_cone, friction_cone_penalty, initial_guess, load_spec, soft_contact_terms)
from eqddp.problems.builder import spec_path
from eqddp.rigidbody import contact_kinematics, evaluate
from eqddp.solver import SolverSettings, solve
from oracles import fd_jacobian, node_fd_errors, rel_err


# --- barrier and penalty terms ---------------------------------------------------

def test_barrier_is_zero_inside_bounds():
    cost, g, H = barrier_cost([0.2, -0.3], -1.0, 1.0, 5.0)
    assert cost == 0.0 and not g.any() and not H.any()


def test_barrier_hand_value():
    cost, g, H = barrier_cost(1.5, -1.0, 1.0, 2.0)
    assert cost == pytest.approx(0.5)
    assert g[0] == pytest.approx(2.0)
    assert H[0, 0] == pytest.approx(4.0)
    cost, g, _ = barrier_cost(-1.5, -1.0, 1.0, 2.0)
    assert cost == pytest.approx(0.5) and g[0] == pytest.approx(-2.0)


def test_barrier_gradient_vanishes_at_the_boundary():
    grads = [barrier_cost(1.0 + eps, -1.0, 1.0, 3.0)[1][0] for eps in (1e-1, 1e-3, 1e-6, 0.0)]
    assert grads == sorted(grads, reverse=True) and grads[-1] == 0.0
    assert grads[2] == pytest.approx(6e-6)


def test_barrier_rejects_unordered_bounds():
    with pytest.raises(ValueError):
        barrier_cost(0.0, 1.0, -1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=4), st.floats(0.1, 10))
def test_barrier_gradient_matches_finite_differences(values, weight):
    v = np.array(values)
    if np.any(np.abs(np.abs(v) - 1.0) < 1e-4):
        return  # the hinge kink is not differentiable at the bound itself
    _, g, _ = barrier_cost(v, -1.0, 1.0, weight)
    fd = fd_jacobian(lambda x: np.array([barrier_cost(x, -1.0, 1.0, weight)[0]]), v)[0]
    assert rel_err(g, fd) <= 1e-6


def test_friction_cone_cases():
    C, c = friction_cone(0.7)
    assert friction_cone_penalty([0.0, 10.0], C, c, 100.0)[0] == 0.0
    lam = np.array([2.0, 0.0])
    cost, g, _ = friction_cone_penalty(lam, C, c, 100.0)
    viol = np.minimum(C @ lam - c, 0.0)
    assert cost == pytest.approx(100.0 * viol @ viol) and cost == pytest.approx(400.0)
    cost, g, _ = friction_cone_penalty([0.7, 1.0], C, c, 100.0)
    assert cost == 0.0 and not g.any()


def test_friction_cone_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    C, c = friction_cone(0.6)
    for lam in rng.normal(scale=3.0, size=(100, 2)):
        _, g, _ = friction_cone_penalty(lam, C, c, 7.0)
        fd = fd_jacobian(lambda x: np.array([friction_cone_penalty(x, C, c, 7.0)[0]]), lam)[0]
        assert rel_err(g, fd) <= 1e-5


def test_friction_cone_vertical_contact_and_bad_coefficient():
    C, c = friction_cone(0.7, dim=1)
    assert friction_cone_penalty([-1.0], C, c, 2.0)[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        friction_cone(0.0)


def test_soft_contact_cases():
    p, v = np.array([0.1, 0.0]), np.array([0.3, -0.2])
    assert soft_contact_terms(p, v, p, v, 1e4, 1e2) == 0.0
    assert soft_contact_terms(p + [0.01, 0.0], v, p, v, 1e4, 1e2) == pytest.approx(1.0)


def test_soft_contact_gradient_through_kinematics():
    spec = load_spec("pjump")
    model = build_problem(spec).meta["model"]
    cs = model.contact_set(["foot"])
    rng = np.random.default_rng(1)
    n = model.nv
    p_ref, v_ref = np.array([0.05, 0.0]), np.array([0.0, 0.1])

    def cost(x):
        ck = contact_kinematics(model, cs, x[:n], x[n:], np.zeros(n))
        return np.array([soft_contact_terms(ck.p, ck.vel, p_ref, v_ref, 1e3, 10.0)])

    for _ in range(100):
        x = np.concatenate([spec.q0 + 0.2 * rng.normal(size=n), rng.normal(size=n)])
        pt = evaluate(model, x[:n], x[n:], np.zeros(n), cs)
        _, gq, gv = soft_contact_terms(pt.p, pt.vel, p_ref, v_ref, 1e3, 10.0, pt.J, pt.dvel_dq)
        assert rel_err(np.concatenate([gq, gv]), fd_jacobian(cost, x)[0]) <= 1e-5


# --- problem builds ------------------------------------------------------------

def test_pendulum_has_one_unactuated_row():
    prob = build_problem(load_spec("pend"))
    assert {(n.nh, n.nu) for n in prob.nodes} == {(1, 2)}
    assert all(n.contacts.nf == 0 for n in prob.nodes)


def test_birotor_has_one_underactuated_row_and_nonsquare_map():
    prob = build_problem(load_spec("quad"))
    act = prob.meta["actuation"]
    assert act.matrix(prob.x0[:3]).shape == (3, 2)
    assert {n.nh for n in prob.nodes} == {1}


def test_monoped_dimension_audit_against_the_schedule():
    spec = load_spec("pjump")
    for form in ("condensed", "redundant"):
        prob = build_problem(spec, form)
        model, act = prob.meta["model"], prob.meta["actuation"]
        n_under = model.nv - act.ntau
        slots = prob.meta["slots"]
        assert len(slots) == prob.N == spec.N + 1
        impulses = [k for k, s in enumerate(slots) if s.kind == "impulse"]
        # one touchdown after the flight phase
        assert len(impulses) == 1 and slots[impulses[0] - 1].active == () and slots[impulses[0]].active == ("foot",)
        for node, slot in zip(prob.nodes, slots):
            if slot.kind == "impulse":
                assert isinstance(node, ImpulseNode) and (node.nu, node.nh) == (0, 0)
                continue
            nf = 2 * len(slot.active)
            ns = 2 * len(slot.swing)
            if form == "condensed":
                assert (node.nh, node.nu) == (n_under + nf, model.nv + nf)
            else:
                assert (node.nh, node.nu) == (model.nv + nf + ns, model.nv + act.ntau + nf + ns)
        stance = [n for n, s in zip(prob.nodes, slots) if s.kind == "running" and s.active]
        flight = [n for n, s in zip(prob.nodes, slots) if s.kind == "running" and not s.active]
        assert len(stance) == spec.node_counts()[0] + spec.node_counts()[2]
        assert len(flight) == spec.node_counts()[1]


def test_forward_baseline_has_no_node_constraints():
    prob = build_problem(load_spec("pjump"), "forward")
    act = prob.meta["actuation"]
    for node in prob.nodes:
        assert node.nh == 0
        assert node.nu in (0, act.ntau)


def _node_audit(prob, states_per_node, rng, scale=0.05):
    traj = initial_guess(prob)
    worst = {}
    for k, node in enumerate(prob.nodes):
        for j in range(states_per_node):
            x, u = traj.states[k], traj.controls[k]
            if j:
                x = prob.manifold.integrate(x, scale * rng.normal(size=x.size))
                u = u + scale * np.maximum(np.abs(u), 1.0) * rng.normal(size=u.size)
            for key, err in node_fd_errors(node, x, u, prob.manifold).items():
                worst[key] = max(worst.get(key, 0.0), err)
    return worst


@pytest.mark.parametrize("form", ["condensed", "redundant", "forward"])
@pytest.mark.parametrize("name", BUILTIN)
def test_node_jacobians_match_finite_differences(name, form):
    prob = build_problem(load_spec(name), form)
    worst = _node_audit(prob, 2, np.random.default_rng(2))
    assert max(worst.values()) <= 1e-5, worst


@pytest.mark.parametrize("name", BUILTIN)
def test_terminal_gradient_matches_finite_differences(name):
    prob = build_problem(load_spec(name))
    rng = np.random.default_rng(3)
    x = prob.manifold.integrate(prob.x0, 0.1 * rng.normal(size=prob.x0.size))
    _, g, _ = prob.terminal.calc_diff(x)
    fd = fd_jacobian(lambda y: np.array([prob.terminal.calc(y)]), x, integrate=prob.manifold.integrate)[0]
    assert rel_err(g, fd) <= 1e-5


@pytest.mark.parametrize("name", BUILTIN)
def test_quasi_static_guess_balances_the_efforts(name):
    prob = build_problem(load_spec(name))
    ev = evaluate_trajectory(prob, initial_guess(prob))
    # states are held at the nominal posture, so only dynamics gaps remain
    assert np.all(np.isfinite(ev.costs))
    assert ev.gaps[0].size and not np.abs(ev.gaps[0]).any()


def test_random_initial_guess_is_reproducible():
    prob = build_problem(load_spec("pjump"))
    a = initial_guess(prob, np.random.default_rng(5), 1.0)
    b = initial_guess(prob, np.random.default_rng(5), 1.0)
    assert all(np.array_equal(x, y) for x, y in zip(a.controls, b.controls))
    assert not all(np.array_equal(x, y) for x, y in zip(a.controls, initial_guess(prob).controls))


# --- solves ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def pjump_redundant():
    prob = build_problem(load_spec("pjump"), "redundant")
    return prob, solve(prob, initial_guess(prob), SolverSettings())


def test_redundant_swing_forces_vanish(pjump_redundant):
    prob, sol = pjump_redundant
    assert sol.converged
    worst = 0.0
    for node, u in zip(prob.nodes, sol.trajectory.controls):
        if isinstance(node, InverseDynamicsNode) and node.ns:
            worst = max(worst, np.abs(node.split(u)[3]).max())
    assert worst <= 1e-9


@pytest.mark.parametrize("name", ["quad", "pjump"])
def test_condensed_and_redundant_costs_agree(name, pjump_redundant):
    spec = load_spec(name)
    sols = {}
    for form in ("condensed", "redundant"):
        if name == "pjump" and form == "redundant":
            sols[form] = pjump_redundant[1]
            continue
        prob = build_problem(spec, form)
        sols[form] = solve(prob, initial_guess(prob), SolverSettings())
    assert all(s.converged for s in sols.values())
    c, r = sols["condensed"].cost, sols["redundant"].cost
    assert abs(c - r) <= 0.01 * abs(r)


# --- spec errors -------------------------------------------------------------------

def _spec_file(tmp_path, mutate):
    d = json.loads(spec_path("pjump").read_text())
    mutate(d)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(d))
    return str(path)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(dt=0.0),
    lambda d: d.update(formulation="implicit"),
    lambda d: d["phases"][0].update(contacts=["hand"]),
    lambda d: d["phases"][0].update(duration=-0.1),
    lambda d: d["initial"].update(q=[0.0, 0.5]),
    lambda d: d["costs"]["running"].append({"feature": "tau", "kind": "barrier", "lower": 1.0, "upper": -1.0}),
    lambda d: d["model"]["links"][0].update(mass=-1.0),
    lambda d: d.pop("dt"),
], ids=["dt", "formulation", "frame", "duration", "q0", "bounds", "mass", "missing"])
def test_inconsistent_specs_are_rejected(tmp_path, mutate):
    with pytest.raises(SpecError):
        build_problem(load_spec(_spec_file(tmp_path, mutate)))


def test_unknown_problem_and_bad_json(tmp_path):
    with pytest.raises(SpecError):
        load_spec("nonexistent")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SpecError):
        load_spec(str(bad))


def test_overrides_keep_the_duration():
    spec = load_spec("pend", {"N": 50})
    base = load_spec("pend")
    assert spec.N == 50 and spec.dt * 50 == pytest.approx(base.dt * base.N)
    with pytest.raises(SpecError):
        load_spec("pend", {"N": 0})
