"""Weighted-square and squared-hinge cost terms.

Every term maps a feature ``r(x, u)`` with Jacobians ``(r_x, r_u)`` to a
cost, gradient and Gauss-Newton Hessian. Weighted squares carry no
``1/2`` factor, so ``w ||r||^2`` has gradient ``2 w r' J``.
"""
from dataclasses import dataclass

import numpy as np

from ..manifold import wrap_angle


def barrier_cost(value, lower, upper, weight):
    """Squared-hinge penalty ``w sum(max(0, v - ub)^2 + max(0, lb - v)^2)``.

    Returns ``(cost, gradient, hessian)`` with respect to ``value``.
    """
    value = np.atleast_1d(np.asarray(value, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), value.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), value.shape)
    if np.any(lower > upper):
        raise ValueError("bounds must be ordered")
    weight = np.broadcast_to(np.asarray(weight, dtype=float), value.shape)
    excess = np.where(value > upper, value - upper, np.where(value < lower, value - lower, 0.0))
    active = (excess != 0.0).astype(float)
    cost = float(np.sum(weight * excess ** 2))
    return cost, 2.0 * weight * excess, np.diag(2.0 * weight * active)


def friction_cone(mu, dim=2):
    """Linearized planar cone ``C lam >= c`` for one point contact.

    A planar point has two facets ``mu fz -+ fx >= 0`` plus the unilateral
    row ``fz >= 0``; a vertical-only contact keeps the unilateral row.
    """
    if mu <= 0:
        raise ValueError("friction coefficient must be positive")
    if dim == 1:
        return np.array([[1.0]]), np.zeros(1)
    return np.array([[-1.0, mu], [1.0, mu], [0.0, 1.0]]), np.zeros(3)


def friction_cone_penalty(lam, C, c, weight):
    """``w sum(min(0, C lam - c)^2)`` with gradient and Hessian in ``lam``."""
    C = np.atleast_2d(C)
    r = C @ np.asarray(lam, dtype=float) - c
    cost, g, H = barrier_cost(r, 0.0, np.inf, weight)
    return cost, C.T @ g, C.T @ H @ C


def soft_contact_terms(p, vel, p_ref, v_ref, w_cpos, w_cvel, J=None, dvel_dq=None):
    """Placement and velocity penalties ``w_p ||p - p_ref||^2 + w_v ||v_p - v_ref||^2``.

    With the kinematic Jacobians (``J = dp/dq``, ``dvel_dq``; ``dv_p/dv = J``)
    also returns the gradient ``(d/dq, d/dv)``.
    """
    ep = np.asarray(p, dtype=float) - p_ref
    ev = np.asarray(vel, dtype=float) - v_ref
    cost = float(w_cpos * ep @ ep + w_cvel * ev @ ev)
    if J is None:
        return cost
    gq = 2.0 * w_cpos * J.T @ ep + 2.0 * w_cvel * dvel_dq.T @ ev
    gv = 2.0 * w_cvel * J.T @ ev
    return cost, gq, gv


@dataclass
class CostTerm:
    """A cost on one named feature of a node.

    ``kind`` is ``"quadratic"`` (``sum w_i (r_i - ref_i)^2``) or
    ``"barrier"`` (squared hinge outside ``[lower, upper]``). ``wrap`` marks
    feature entries that are angles, whose residual is wrapped.
    """

    feature: str
    weight: np.ndarray
    kind: str = "quadratic"
    ref: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    wrap: tuple = ()

    def __post_init__(self):
        if self.kind not in ("quadratic", "barrier"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        self.weight = np.asarray(self.weight, dtype=float)
        if self.kind == "barrier":
            lo = -np.inf if self.lower is None else self.lower
            hi = np.inf if self.upper is None else self.upper
            self.lower = np.asarray(lo, dtype=float)
            self.upper = np.asarray(hi, dtype=float)
            if np.any(self.lower > self.upper):
                raise ValueError(f"{self.feature}: bounds must be ordered")

    def residual(self, value):
        if self.kind == "barrier":
            return np.maximum(value - self.upper, 0.0) + np.minimum(value - self.lower, 0.0)
        r = value if self.ref is None else value - self.ref
        if self.wrap:
            r = r.copy()
            idx = list(self.wrap)
            r[idx] = wrap_angle(r[idx])
        return r

    def value(self, feature_value):
        r = self.residual(feature_value)
        return float((self.weight * r) @ r)

    def add_derivatives(self, feature_value, jx, ju, acc):
        """Accumulate cost, gradient and Gauss-Newton Hessian into ``acc``."""
        r = self.residual(feature_value)
        w = np.broadcast_to(self.weight, r.shape)
        if self.kind == "barrier":
            w = w * (r != 0.0)
        acc.cost += float(np.sum(w * r * r))
        wr = 2.0 * w * r
        if jx is not None:
            acc.lx += jx.T @ wr
            wjx = 2.0 * w[:, None] * jx
            acc.Lxx += jx.T @ wjx
        if ju is not None:
            acc.lu += ju.T @ wr
            wju = 2.0 * w[:, None] * ju
            acc.Luu += ju.T @ wju
            if jx is not None:
                acc.Lxu += jx.T @ wju


class CostAccumulator:
    def __init__(self, ndx, nu):
        self.cost = 0.0
        self.lx = np.zeros(ndx)
        self.lu = np.zeros(nu)
        self.Lxx = np.zeros((ndx, ndx))
        self.Lxu = np.zeros((ndx, nu))
        self.Luu = np.zeros((nu, nu))


def make_term(d, wrap=()):
    """Build a :class:`CostTerm` from a spec-file dictionary."""
    kind = d.get("kind", "quadratic")
    ref = d.get("ref")
    return CostTerm(
        feature=d["feature"], weight=np.asarray(d.get("weight", 1.0), dtype=float), kind=kind,
        ref=None if ref is None else np.asarray(ref, dtype=float),
        lower=d.get("lower"), upper=d.get("upper"), wrap=tuple(wrap),
    )
