"""Equality-constrained DDP with a feasibility-driven multiple-shooting search."""
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _riccati
from .model import EvaluationError, ModelError, Trajectory, TrajectoryEval, evaluate_trajectory, linearize_node

MU_MIN = 1e-12
MU_MAX = 1e12
EPS_FLOOR = 1e-14

FACTORIZATIONS = ("nullspace", "schur")
EVENTS = ("cholesky-failure", "small-step", "low-curvature-optimality", "large-step")


@dataclass
class SolverSettings:
    tol: float = 1e-9
    max_iters: int = 200
    rho: float = 0.3
    eta1: float = 0.1
    eta2: float = 2.0
    alpha0: float = 0.01
    alpha1: float = 0.5
    kappa0: float = 1e-4
    beta_inc: float = 1e6
    beta_dec: float = 10.0
    mu0: float = 1e-9
    nu0: float = 0.0
    factorization: str = "nullspace"
    basis_method: str = "lu-full-pivot"
    n_backtracks: int = 10
    feasibility_driven: bool = True
    threads: int = 1
    certify: bool = True
    correction_iters: int = 10

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if not 0.0 < self.eta1 < 1.0:
            raise ValueError("eta1 must lie in (0, 1)")
        if not self.eta2 > 0.0:
            raise ValueError("eta2 must be positive")
        if not 0.0 < self.alpha0 < self.alpha1 <= 1.0:
            raise ValueError("need 0 < alpha0 < alpha1 <= 1")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.correction_iters < 0:
            raise ValueError("correction_iters must be nonnegative")
        if self.factorization not in FACTORIZATIONS:
            raise ValueError(f"unknown factorization {self.factorization!r}")
        if self.basis_method not in ("lu-full-pivot", "qr-col-pivot"):
            raise ValueError(f"unknown basis method {self.basis_method!r}")
        if self.mu0 < 0.0 or self.nu0 < 0.0:
            raise ValueError("mu0 and nu0 must be nonnegative")

    @property
    def step_lengths(self):
        return [2.0 ** -j for j in range(self.n_backtracks + 1)]


@dataclass
class KnotPolicy:
    """Local policy ``du = -pi - Pi dx``."""

    pi: np.ndarray
    Pi: np.ndarray


@dataclass
class ValueModel:
    dV1: float
    dV2: float
    Vx: np.ndarray
    Vxx: np.ndarray


@dataclass
class NullspaceBlocks:
    Y: np.ndarray
    Z: np.ndarray
    psi_h: np.ndarray
    psi_hx: np.ndarray
    rank: int


@dataclass
class BackwardResult:
    policies: list
    values: list
    Qu: list
    Quu: list
    gammas: list
    spd_dims: list

    @property
    def dV1(self):
        return float(sum(v.dV1 for v in self.values))

    @property
    def dV2(self):
        return float(sum(v.dV2 for v in self.values))


class BackwardFailure:
    def __init__(self, node):
        self.node = node

    def __bool__(self):
        return False


@dataclass
class IterationRecord:
    iter: int
    cost: float
    gap_l1: float
    constraint_l1: float
    alpha: float
    mu: float
    nu: float
    metric: float
    expected_dl1: float
    t_derivatives: float
    t_backward: float
    t_forward: float
    gap_inf: float

    def as_dict(self):
        return asdict(self)


@dataclass
class SolverState:
    mu: float
    nu: float
    log: list = field(default_factory=list)


@dataclass
class Solution:
    trajectory: Trajectory
    evaluation: object
    policies: list
    values: list
    node_data: list
    backward: BackwardResult
    state: SolverState
    converged: bool
    failed: bool
    metric: float
    message: str = ""

    @property
    def iterations(self):
        return len(self.state.log)

    @property
    def cost(self):
        return self.evaluation.total_cost


# ---------------------------------------------------------------------------
# derivative stage

_POOLS = {}


def _pool(threads):
    pool = _POOLS.get(threads)
    if pool is None:
        pool = ThreadPoolExecutor(max_workers=threads)
        _POOLS[threads] = pool
    return pool


def default_threads():
    return max(1, min(8, os.cpu_count() or 1))


def _precompute(data, method_code):
    nh = data.hu.shape[0]
    nu = data.hu.shape[1]
    if nh == 0:
        return None
    Y, Z, psi_h, psi_hx, rank, ok = _riccati.nullspace_precompute(
        np.ascontiguousarray(data.hu), np.ascontiguousarray(data.hx), np.ascontiguousarray(data.h_gap), method_code)
    if not ok:
        raise ModelError(f"constraint Jacobian has rank {rank} < {nh} rows (nu={nu})")
    return NullspaceBlocks(Y, Z, psi_h, psi_hx, int(rank))


def compute_node_data(problem, traj, settings=None):
    """Linearize every node; in nullspace mode also factorize each ``hu``.

    Node computations are independent and run on a thread pool when
    ``settings.threads > 1``.
    """
    settings = settings or SolverSettings()
    m = problem.manifold
    nullspace = settings.factorization == "nullspace"
    method_code = _riccati.LU_FULL_PIVOT if settings.basis_method == "lu-full-pivot" else _riccati.QR_COL_PIVOT

    def work(k):
        data = linearize_node(problem.nodes[k], traj.states[k], traj.states[k + 1], traj.controls[k], m, k)
        pre = None
        if nullspace:
            try:
                pre = _precompute(data, method_code)
            except ModelError as err:
                raise ModelError(f"node {k}: {err}") from None
        return data, pre

    N = problem.N
    if settings.threads > 1 and N > 1:
        out = list(_pool(settings.threads).map(work, range(N)))
    else:
        out = [work(k) for k in range(N)]
    cost, lx, Lxx = problem.terminal.calc_diff(traj.states[N])
    if not (np.isfinite(cost) and np.all(np.isfinite(lx)) and np.all(np.isfinite(Lxx))):
        raise EvaluationError(N, "terminal cost")
    terminal = (float(cost), np.asarray(lx, dtype=float), np.asarray(Lxx, dtype=float))
    return [o[0] for o in out], [o[1] for o in out], terminal


# ---------------------------------------------------------------------------
# backward pass

def node_action_value(data, Vx_next, Vxx_next, mu=0.0, sparse=True):
    na = data.na if sparse else data.fu.shape[1]
    return _riccati.action_value(
        data.lx, data.lu, data.Lxx, np.ascontiguousarray(data.Lxu), data.Luu, data.fx,
        np.ascontiguousarray(data.fu), int(na), data.f_gap, Vx_next, Vxx_next, float(mu))


def backward_pass(problem, node_data, precomp, terminal, settings, mu):
    """Riccati sweep from node ``N - 1`` to ``0``.

    Returns a :class:`BackwardResult`, or a falsy :class:`BackwardFailure`
    naming the node whose factorization was not positive definite.
    """
    N = problem.N
    _, lx_N, Lxx_N = terminal
    Vx = lx_N.copy()
    Vxx = 0.5 * (Lxx_N + Lxx_N.T)
    values = [None] * (N + 1)
    values[N] = ValueModel(0.0, 0.0, Vx, Vxx)
    policies = [None] * N
    Qus = [None] * N
    Quus = [None] * N
    gammas = [None] * N
    dims = [None] * N
    schur = settings.factorization == "schur"
    for k in range(N - 1, -1, -1):
        d = node_data[k]
        Qx, Qu, Qxx, Qux, Quu = node_action_value(d, Vx, Vxx, mu)
        if schur:
            pi, Pi, gff, gfb, ok, du, dh = _riccati.schur_policy(Qu, Qux, Quu, d.hx, np.ascontiguousarray(d.hu), d.h_gap)
            gammas[k] = (gff, gfb)
            dims[k] = tuple(n for n in (du, dh) if n)
        else:
            pre = precomp[k]
            nu = Qu.shape[0]
            if pre is None:
                Z = np.eye(nu)
                psi_h = np.zeros(nu)
                psi_hx = np.zeros((nu, Qx.shape[0]))
            else:
                Z, psi_h, psi_hx = pre.Z, pre.psi_h, pre.psi_hx
            pi, Pi, ok, dz = _riccati.nullspace_policy(Qu, Qux, Quu, Z, psi_h, psi_hx)
            dims[k] = (dz,) if dz else ()
        if not ok:
            return BackwardFailure(k)
        Vx, Vxx, dV1, dV2 = _riccati.value_update(Qx, Qu, Qxx, Qux, Quu, pi, Pi)
        values[k] = ValueModel(float(dV1), float(dV2), Vx, Vxx)
        policies[k] = KnotPolicy(pi, Pi)
        Qus[k] = Qu
        Quus[k] = Quu
    return BackwardResult(policies, values, Qus, Quus, gammas, dims)


def constraint_multipliers(data, policy, Qu, Quu, Qux, dx):
    """Least-squares multiplier of the node constraint along ``dx``.

    Solves ``hu' gamma = -(Qu + Quu du + Qux dx)`` with ``du = -pi - Pi dx``.
    """
    if data.hu.shape[0] == 0:
        return np.zeros(0)
    du = -policy.pi - policy.Pi @ dx
    r = -(Qu + Quu @ du + Qux @ dx)
    return np.linalg.lstsq(data.hu.T, r, rcond=None)[0]


def kkt_residual(problem, traj, node_data=None, settings=None):
    """First-order optimality certificate of ``traj``, independent of the solver state.

    The costates ``xi_0..xi_N`` and node multipliers ``gamma_k`` are chosen
    jointly to minimize the Lagrangian-gradient rows

        lx_k + fx_k' xi_{k+1} + hx_k' gamma_k - xi_k,   lx_N - xi_N,
        lu_k + fu_k' xi_{k+1} + hu_k' gamma_k,

    so the remaining residual is the distance to a KKT point. A backward
    recursion that satisfies the state rows exactly would amplify round-off
    through unstable dynamics, hence the joint least-squares solve. Returns a
    dict with ``stationarity`` (inf-norm of the residual), ``feasibility``
    (inf-norm of all gaps and constraint residuals) and ``scale`` (inf-norm
    of the cost gradient).
    """
    if node_data is None:
        node_data = compute_node_data(problem, traj, settings)[0]
    _, lxN, _ = problem.terminal.calc_diff(traj.states[-1])
    lxN = np.asarray(lxN, dtype=float)
    N = len(node_data)
    ndx = lxN.shape[0]
    nus = [d.lu.shape[0] for d in node_data]
    nhs = [d.hu.shape[0] for d in node_data]
    row0 = np.concatenate([[0], np.cumsum([ndx + nu for nu in nus])])
    col_g = (N + 1) * ndx + np.concatenate([[0], np.cumsum(nhs)])
    A = np.zeros((row0[-1] + ndx, col_g[-1]))
    b = np.zeros(A.shape[0])
    for k, d in enumerate(node_data):
        r, nu = row0[k], nus[k]
        xk, xn = k * ndx, (k + 1) * ndx
        g = slice(col_g[k], col_g[k + 1])
        A[r:r + ndx, xk:xk + ndx] = -np.eye(ndx)
        A[r:r + ndx, xn:xn + ndx] = d.fx.T
        A[r:r + ndx, g] = d.hx.T
        A[r + ndx:r + ndx + nu, xn:xn + ndx] = d.fu.T
        A[r + ndx:r + ndx + nu, g] = d.hu.T
        b[r:r + ndx] = -d.lx
        b[r + ndx:r + ndx + nu] = -d.lu
    A[row0[-1]:, N * ndx:(N + 1) * ndx] = -np.eye(ndx)
    b[row0[-1]:] = -lxN
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    stat = float(np.abs(A @ sol - b).max(initial=0.0))
    feas = float(np.abs(problem.manifold.difference(problem.x0, traj.states[0])).max(initial=0.0))
    scale = float(np.abs(lxN).max(initial=0.0))
    for d in node_data:
        feas = max(feas, float(np.abs(d.f_gap).max(initial=0.0)), float(np.abs(d.h_gap).max(initial=0.0)))
        scale = max(scale, float(np.abs(d.lx).max(initial=0.0)), float(np.abs(d.lu).max(initial=0.0)))
    return {"stationarity": stat, "feasibility": feas, "scale": scale}


# ---------------------------------------------------------------------------
# forward pass

CORRECTION_FLOOR = 1e-13


def constraint_correctors(node_data):
    """Pseudo-inverses of each ``hu``, used to pull rollout controls back onto the constraints."""
    return [np.linalg.pinv(d.hu) if d.hu.shape[0] else None for d in node_data]


def _correct(node, xs, u, ev, R, target, iters):
    # simplified Newton on h(x, u) = target with the Jacobian frozen at the
    # linearization point; stops as soon as a sweep fails to halve the error
    h = ev.h
    err = np.abs(h - target).max(initial=0.0)
    u0 = u
    for _ in range(iters):
        if err <= CORRECTION_FLOOR:
            break
        u_new = u - R @ (h - target)
        h_new = node.constraint(xs, u_new)
        err_new = np.abs(h_new - target).max(initial=0.0)
        if not err_new < 0.5 * err:
            break
        u, h, err = u_new, h_new, err_new
    if u is u0:
        return u, ev
    ev_new = node.calc(xs, u)
    if not (np.isfinite(ev_new.cost) and np.all(np.isfinite(ev_new.x_next))):
        return u0, ev
    return u, ev_new


def forward_rollout(problem, traj, evaluation, policies, alpha, feasibility_driven=True,
                    correctors=None, correction_iters=0):
    """Nonlinear rollout of the policy at step length ``alpha``.

    With ``feasibility_driven`` every defect shrinks by ``1 - alpha``;
    otherwise the dynamics are simulated exactly from the initial estimate.
    With ``correctors`` each control gets up to ``correction_iters``
    second-order corrections so that the node constraint matches its linear
    prediction ``(1 - alpha) h``. Without them the curvature of the
    constraints leaves an ``O(alpha^2)`` residual that a large merit penalty
    rejects even when the step is good.
    Returns ``(trajectory, evaluation, dx)`` or ``None`` on non-finite values.
    """
    m = problem.manifold
    N = problem.N
    states = [None] * (N + 1)
    controls = [None] * N
    costs = np.empty(N)
    x_next, hs, gaps = [], [], []
    if feasibility_driven:
        xs = m.integrate(problem.x0, (alpha - 1.0) * evaluation.gaps[0])
    else:
        xs = m.normalize(problem.x0)
    states[0] = xs
    gaps.append(m.difference(problem.x0, xs))
    dxs = [None] * (N + 1)
    with np.errstate(all="ignore"):
        for k in range(N):
            dx = m.difference(xs, traj.states[k])
            dxs[k] = dx
            pol = policies[k]
            u = traj.controls[k] - alpha * pol.pi - pol.Pi @ dx
            try:
                ev = problem.nodes[k].calc(xs, u)
            except (FloatingPointError, ValueError, np.linalg.LinAlgError):
                return None
            if not (np.isfinite(ev.cost) and np.all(np.isfinite(ev.x_next)) and np.all(np.isfinite(ev.h))):
                return None
            if correction_iters and correctors is not None and correctors[k] is not None:
                target = (1.0 - alpha) * evaluation.h[k]
                try:
                    u, ev = _correct(problem.nodes[k], xs, u, ev, correctors[k], target, correction_iters)
                except (FloatingPointError, ValueError, np.linalg.LinAlgError):
                    pass
            controls[k] = u
            costs[k] = ev.cost
            x_next.append(ev.x_next)
            hs.append(np.asarray(ev.h, dtype=float))
            if feasibility_driven:
                xn = m.integrate(ev.x_next, (alpha - 1.0) * evaluation.gaps[k + 1])
            else:
                xn = m.normalize(ev.x_next)
            gaps.append(m.difference(ev.x_next, xn))
            states[k + 1] = xn
            xs = xn
        dxs[N] = m.difference(xs, traj.states[N])
        term = problem.terminal.calc(xs)
    if not np.isfinite(term):
        return None
    return Trajectory(states, controls), TrajectoryEval(costs, float(term), x_next, hs, gaps), dxs


def expected_improvement(backward, evaluation, dxs, alpha, feasibility_driven=True):
    """Predicted change of the cost for the step at ``alpha``.

    ``dxs`` are the rollout deviations at this ``alpha``; they are normalized
    by ``alpha`` so the model is quadratic in the step length. Each node
    contributes ``-pi'Qu`` and ``pi'Quu pi`` plus the correction for the
    defect arriving at it.
    """
    d1 = 0.0
    d2 = 0.0
    N = len(backward.policies)
    for k in range(N + 1):
        val = backward.values[k]
        d1 += val.dV1
        d2 += val.dV2
        if not feasibility_driven:
            continue
        g = evaluation.gaps[k]
        if not np.any(g):
            continue
        dk = dxs[k] / alpha
        Vxx_d = val.Vxx @ dk
        Vxx_g = val.Vxx @ g
        d1 += g @ (val.Vx + Vxx_g - Vxx_d)
        d2 += g @ (2.0 * Vxx_d - Vxx_g)
    return alpha * (d1 + 0.5 * alpha * d2), d1, d2


def linear_deviations(problem, node_data, policies, evaluation, alpha=1.0):
    """Deviations predicted by the linearized dynamics for the step at ``alpha``."""
    N = problem.N
    dx = alpha * evaluation.gaps[0]
    out = [dx]
    for k in range(N):
        d = node_data[k]
        du = -alpha * policies[k].pi - policies[k].Pi @ dx
        dx = d.fx @ dx + d.fu @ du + alpha * d.f_gap
        out.append(dx)
    return out


# ---------------------------------------------------------------------------
# merit, acceptance, regularization

def merit_value(evaluation, nu):
    """Total cost (terminal included) plus ``nu`` times the l1 infeasibility."""
    return evaluation.total_cost + nu * evaluation.total_infeasibility


def merit_penalty_update(nu, dl1_full, total_eps, rho=0.3):
    if total_eps <= EPS_FLOOR:
        return nu
    return max(nu, abs(dl1_full) / ((1.0 - rho) * total_eps))


def accept_step(phi_old, phi_new, dPhi, dl_alpha, settings):
    diff = phi_new - phi_old
    if dPhi <= 0.0:
        return diff <= settings.eta1 * dPhi
    return diff <= settings.eta2 * dl_alpha


def update_regularization(mu, event, settings):
    if event not in EVENTS:
        raise ValueError(f"unknown regularization event {event!r}")
    if event == "large-step":
        mu = mu / settings.beta_dec
    else:
        mu = max(mu, MU_MIN) * settings.beta_inc
    return min(max(mu, MU_MIN), MU_MAX)


def stopping_metric(total_eps, dl1_full):
    return max(total_eps, abs(dl1_full))


# ---------------------------------------------------------------------------
# driver

def solve(problem, initial, settings=None, state=None, callback=None):
    """Run the equality-constrained DDP iteration from ``initial``.

    ``state`` carries ``mu`` across calls (warm starts); ``nu`` always
    restarts from ``settings.nu0``. Each log record corresponds to one
    attempted step; convergence is tested before every step.
    """
    settings = settings or SolverSettings()
    mu = settings.mu0 if state is None else state.mu
    st = SolverState(mu=mu, nu=settings.nu0)
    traj = initial.copy()
    fd = settings.feasibility_driven
    if fd:
        ev = evaluate_trajectory(problem, traj)
    else:
        # classical shooting starts from the simulated controls, so the
        # state guess is discarded and every gap is closed from the outset
        zero = [KnotPolicy(np.zeros(len(u)), np.zeros((len(u), problem.manifold.nx))) for u in traj.controls]
        sim = forward_rollout(problem, traj, evaluate_trajectory(problem, traj), zero, 1.0, False)
        if sim is None:
            raise EvaluationError(0, "rollout of the initial controls")
        traj, ev = sim[0], sim[1]
    converged = False
    failed = False
    message = ""
    metric = np.inf
    backward = None
    node_data = None
    it = 0
    while True:
        t0 = time.perf_counter()
        node_data, precomp, terminal = compute_node_data(problem, traj, settings)
        corr = constraint_correctors(node_data) if settings.correction_iters else None
        roll = {"feasibility_driven": fd, "correctors": corr, "correction_iters": settings.correction_iters}
        t1 = time.perf_counter()
        while True:
            backward = backward_pass(problem, node_data, precomp, terminal, settings, st.mu)
            if backward:
                break
            if st.mu >= MU_MAX:
                failed = True
                message = f"regularization exhausted at node {backward.node}"
                break
            st.mu = update_regularization(st.mu, "cholesky-failure", settings)
        t2 = time.perf_counter()
        if failed:
            backward = None
            break
        total_eps = ev.total_infeasibility
        trial = forward_rollout(problem, traj, ev, backward.policies, 1.0, **roll)
        if trial is not None:
            dxs1 = trial[2]
        else:
            dxs1 = linear_deviations(problem, node_data, backward.policies, ev)
        dl1_full = expected_improvement(backward, ev, dxs1, 1.0, fd)[0]
        metric = stopping_metric(total_eps, dl1_full)
        if metric < settings.tol and st.mu > settings.mu0 and settings.certify:
            # a heavily damped step hides the remaining optimality error, so
            # a convergence claim is re-checked without the extra damping
            clean = backward_pass(problem, node_data, precomp, terminal, settings, settings.mu0)
            if clean:
                trial = forward_rollout(problem, traj, ev, clean.policies, 1.0, **roll)
                dxs1 = trial[2] if trial is not None else linear_deviations(problem, node_data, clean.policies, ev)
                dl1_clean = expected_improvement(clean, ev, dxs1, 1.0, fd)[0]
                if stopping_metric(total_eps, dl1_clean) >= settings.tol:
                    st.mu = settings.mu0
                    backward, dl1_full = clean, dl1_clean
                    metric = stopping_metric(total_eps, dl1_full)
        if metric < settings.tol:
            converged = True
            break
        if it >= settings.max_iters:
            message = "iteration budget exhausted"
            break
        it += 1
        low_curvature = backward.dV2 < settings.kappa0 and ev.constraint_l1 > settings.tol
        st.nu = merit_penalty_update(st.nu, dl1_full, total_eps, settings.rho)
        accepted = 0.0
        for alpha in settings.step_lengths:
            if alpha != 1.0:
                trial = forward_rollout(problem, traj, ev, backward.policies, alpha, **roll)
            if trial is None:
                continue
            cand, cand_ev, dxs = trial
            dl = expected_improvement(backward, ev, dxs, alpha, fd)[0]
            # inside the tolerance band the infeasibility is round-off, and a
            # large penalty would turn that noise into spurious rejections
            nu = 0.0 if max(total_eps, cand_ev.total_infeasibility) <= settings.tol else st.nu
            phi_old = merit_value(ev, nu)
            phi_new = merit_value(cand_ev, nu)
            dPhi = dl + alpha * total_eps
            if accept_step(phi_old, phi_new, dPhi, dl, settings):
                traj, ev = cand, cand_ev
                accepted = alpha
                break
        t3 = time.perf_counter()
        if accepted < settings.alpha0 or low_curvature:
            st.mu = update_regularization(st.mu, "small-step", settings)
        elif accepted >= settings.alpha1:
            st.mu = update_regularization(st.mu, "large-step", settings)
        rec = IterationRecord(
            iter=it, cost=ev.total_cost, gap_l1=ev.gap_l1, constraint_l1=ev.constraint_l1, alpha=accepted,
            mu=st.mu, nu=st.nu, metric=metric, expected_dl1=dl1_full, t_derivatives=t1 - t0,
            t_backward=t2 - t1, t_forward=t3 - t2, gap_inf=ev.gap_inf)
        st.log.append(rec)
        if callback is not None:
            callback(rec)
    if not message and converged:
        message = "converged"
    return Solution(
        trajectory=traj, evaluation=ev,
        policies=backward.policies if backward else None,
        values=backward.values if backward else None,
        node_data=node_data, backward=backward, state=st, converged=converged,
        failed=failed, metric=float(metric), message=message)
