"""Per-node model interface, node data and the discrete problem container."""
from dataclasses import dataclass, field

import numpy as np

from .manifold import ManifoldSpec


class EvaluationError(RuntimeError):
    """A node callback produced non-finite values."""

    def __init__(self, node, what):
        super().__init__(f"node {node}: non-finite {what}")
        self.node = node


class ModelError(ValueError):
    """A node model is structurally invalid (dimensions, rank)."""


@dataclass
class NodeEval:
    cost: float
    x_next: np.ndarray
    h: np.ndarray


@dataclass
class NodeData:
    """First-order model of one node around ``(x, u)``.

    ``f_gap`` is ``f(x, u) (-) x_next_stored``. ``na`` marks functional
    sparsity: only the first ``na`` control columns of ``fu`` may be nonzero.
    """

    lx: np.ndarray
    lu: np.ndarray
    Lxx: np.ndarray
    Lxu: np.ndarray
    Luu: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    hx: np.ndarray
    hu: np.ndarray
    h_gap: np.ndarray
    cost_value: float
    x_next: np.ndarray
    f_gap: np.ndarray = None
    na: int = None

    def __post_init__(self):
        if self.na is None:
            self.na = self.fu.shape[1]


class NodeModel:
    """Base class for running nodes.

    Subclasses set ``nx``, ``nu``, ``nh`` and implement :meth:`calc` and
    :meth:`calc_diff`. ``na`` (leading control columns that enter the
    dynamics) defaults to ``nu``. Jacobians are expressed on tangent
    coordinates.
    """

    nx = 0
    nu = 0
    nh = 0
    na = None

    def calc(self, x, u):
        raise NotImplementedError

    def calc_diff(self, x, u):
        raise NotImplementedError

    def constraint(self, x, u):
        """Constraint residual alone; subclasses may skip the cost and dynamics."""
        return self.calc(x, u).h

    def default_control(self, x):
        return np.zeros(self.nu)


class TerminalModel:
    nx = 0

    def calc(self, x):
        raise NotImplementedError

    def calc_diff(self, x):
        """Return ``(cost, lx, Lxx)``."""
        raise NotImplementedError


class QuadraticTerminal(TerminalModel):
    """``0.5 (x - ref)' W (x - ref)`` measured on the manifold."""

    def __init__(self, manifold, W, ref=None):
        self.manifold = manifold
        self.nx = manifold.nx
        self.W = np.asarray(W, dtype=float)
        self.ref = manifold.zero() if ref is None else np.asarray(ref, dtype=float)

    def calc(self, x):
        r = self.manifold.difference(x, self.ref)
        return 0.5 * r @ self.W @ r

    def calc_diff(self, x):
        r = self.manifold.difference(x, self.ref)
        g = self.W @ r
        return 0.5 * r @ g, g, self.W.copy()


class LinearQuadraticNode(NodeModel):
    """Linear dynamics, quadratic cost and affine equality constraint.

    ``f = A x + B u + c``,
    ``l = 0.5 x'Qx + x'Su + 0.5 u'Ru + q'x + r'u``,
    ``h = D x + C u + e``.
    """

    def __init__(self, A, B, Q, R, S=None, q=None, r=None, c=None, C=None, D=None, e=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.nx, self.nu = self.B.shape
        nx, nu = self.nx, self.nu
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)
        self.S = np.zeros((nx, nu)) if S is None else np.asarray(S, dtype=float)
        self.q = np.zeros(nx) if q is None else np.asarray(q, dtype=float)
        self.r = np.zeros(nu) if r is None else np.asarray(r, dtype=float)
        self.c = np.zeros(nx) if c is None else np.asarray(c, dtype=float)
        if C is None:
            C = np.zeros((0, nu))
        self.C = np.atleast_2d(np.asarray(C, dtype=float)).reshape(-1, nu)
        self.nh = self.C.shape[0]
        self.D = np.zeros((self.nh, nx)) if D is None else np.asarray(D, dtype=float).reshape(self.nh, nx)
        self.e = np.zeros(self.nh) if e is None else np.asarray(e, dtype=float)
        if self.nh > self.nu:
            raise ModelError(f"nh={self.nh} exceeds nu={self.nu}")

    def calc(self, x, u):
        cost = 0.5 * x @ self.Q @ x + x @ self.S @ u + 0.5 * u @ self.R @ u + self.q @ x + self.r @ u
        return NodeEval(cost, self.A @ x + self.B @ u + self.c, self.D @ x + self.C @ u + self.e)

    def calc_diff(self, x, u):
        ev = self.calc(x, u)
        return NodeData(
            lx=self.Q @ x + self.S @ u + self.q,
            lu=self.R @ u + self.S.T @ x + self.r,
            Lxx=self.Q.copy(), Lxu=self.S.copy(), Luu=self.R.copy(),
            fx=self.A.copy(), fu=self.B.copy(),
            hx=self.D.copy(), hu=self.C.copy(),
            h_gap=ev.h, cost_value=ev.cost, x_next=ev.x_next,
        )


@dataclass
class Problem:
    """``N`` running nodes, a terminal cost and the initial state estimate."""

    x0: np.ndarray
    nodes: list
    terminal: TerminalModel
    manifold: ManifoldSpec
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        for k, node in enumerate(self.nodes):
            if node.nh > node.nu:
                raise ModelError(f"node {k}: nh={node.nh} exceeds nu={node.nu}")

    @property
    def N(self):
        return len(self.nodes)

    def with_initial_state(self, x0):
        return Problem(np.asarray(x0, dtype=float), self.nodes, self.terminal, self.manifold, self.name, self.meta)


@dataclass
class Trajectory:
    states: list
    controls: list

    def __post_init__(self):
        self.states = [np.asarray(x, dtype=float) for x in self.states]
        self.controls = [np.asarray(u, dtype=float) for u in self.controls]
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("a trajectory needs exactly one more state than controls")

    def copy(self):
        return Trajectory([x.copy() for x in self.states], [u.copy() for u in self.controls])

    @classmethod
    def constant(cls, problem, x=None):
        x = problem.x0 if x is None else np.asarray(x, dtype=float)
        return cls([x.copy() for _ in range(problem.N + 1)], [n.default_control(x) for n in problem.nodes])


@dataclass
class TrajectoryEval:
    """Values of every node along a trajectory.

    ``gaps[0]`` is the initial-state mismatch ``x0_estimate (-) x_0``;
    ``gaps[k + 1]`` is node ``k``'s dynamics defect.
    """

    costs: np.ndarray
    terminal_cost: float
    x_next: list
    h: list
    gaps: list

    @property
    def total_cost(self):
        return float(np.sum(self.costs) + self.terminal_cost)

    @property
    def infeasibility(self):
        """Per-node ``||f_gap||_1 + ||h_gap||_1`` (node k owns its outgoing defect)."""
        return np.array([np.abs(self.gaps[k + 1]).sum() + np.abs(self.h[k]).sum() for k in range(len(self.h))])

    @property
    def gap_l1(self):
        return float(sum(np.abs(g).sum() for g in self.gaps))

    @property
    def constraint_l1(self):
        return float(sum(np.abs(h).sum() for h in self.h))

    @property
    def total_infeasibility(self):
        return self.gap_l1 + self.constraint_l1

    @property
    def gap_inf(self):
        return max((float(np.abs(g).max()) for g in self.gaps if g.size), default=0.0)


def evaluate_trajectory(problem, traj):
    m = problem.manifold
    N = problem.N
    costs = np.empty(N)
    x_next, hs = [], []
    gaps = [m.difference(problem.x0, traj.states[0])]
    for k, node in enumerate(problem.nodes):
        ev = node.calc(traj.states[k], traj.controls[k])
        if not (np.isfinite(ev.cost) and np.all(np.isfinite(ev.x_next)) and np.all(np.isfinite(ev.h))):
            raise EvaluationError(k, "values")
        costs[k] = ev.cost
        x_next.append(ev.x_next)
        hs.append(np.asarray(ev.h, dtype=float))
        gaps.append(m.difference(ev.x_next, traj.states[k + 1]))
    term = problem.terminal.calc(traj.states[N])
    return TrajectoryEval(costs, float(term), x_next, hs, gaps)


def linearize_node(model, x, x_next, u, manifold=None, index=-1):
    """Linearize ``model`` at ``(x, u)`` and measure its defect against ``x_next``.

    The chart Jacobians of the angle-wrapped manifold are identities, so the
    model's Jacobians already act on tangent increments.
    """
    data = model.calc_diff(x, u)
    if manifold is None:
        data.f_gap = data.x_next - x_next
    else:
        data.f_gap = manifold.difference(data.x_next, x_next)
    for name in ("lx", "lu", "Lxx", "Lxu", "Luu", "fx", "fu", "hx", "hu", "h_gap", "f_gap"):
        if not np.all(np.isfinite(getattr(data, name))):
            raise EvaluationError(index, name)
    if not np.isfinite(data.cost_value):
        raise EvaluationError(index, "cost")
    if data.na is None or data.na > model.nu:
        data.na = model.nu
    return data
