"""Inverse/forward dynamics, contact kinematics and constraint assembly.

Sign conventions: contact forces ``lam`` act on the robot, so
``ID(q, v, a, lam) = M a + b(q, v) - Jc' lam``; the actuation enters as
``ID - A(q) tau = 0``; contact rows are the stabilized contact acceleration
``a_c = Jc a + dJc v + kd Jc v + kp (p - ref)``.
"""
from dataclasses import dataclass

import numpy as np

from ._kernels import sweep
from .model import ContactSet

KKT_COND_LIMIT = 1e12

_NO_CONTACTS = ContactSet(())


class DynamicsError(RuntimeError):
    """A contact KKT system or effort map is singular."""


def _contact_arrays(contacts):
    body = np.array([f.body for f in contacts.frames], dtype=np.int64)
    pos = np.array([f.offset for f in contacts.frames], dtype=float).reshape(-1, 2)
    rows_frame, rows_axis = [], []
    for i, f in enumerate(contacts.frames):
        for ax in ([1] if f.dim == 1 else [0, 1]):
            rows_frame.append(i)
            rows_axis.append(ax)
    return body, pos, np.array(rows_frame, dtype=np.int64), np.array(rows_axis, dtype=np.int64)


def _run(model, q, v, a, contacts, lam, deriv, gravity=True):
    contacts = _NO_CONTACTS if contacts is None else contacts
    body, pos, rf, ra = _contact_arrays(contacts)
    lam2 = contacts.expand_forces(np.zeros(contacts.nf) if lam is None else lam)
    g = model.gravity if gravity else 0.0
    out = sweep(*model.kernel_args(), np.asarray(q, dtype=float), np.asarray(v, dtype=float),
                np.asarray(a, dtype=float), g, body, pos, lam2, deriv)
    return out, rf, ra


@dataclass
class DynamicsPoint:
    """Inverse dynamics and contact quantities at one ``(q, v, a, lam)``.

    Contact arrays are stacked per constraint row. ``acc`` excludes the
    Baumgarte terms; :func:`contact_kinematics` adds them.
    """

    tau: np.ndarray
    dtau_dq: np.ndarray
    dtau_dv: np.ndarray
    M: np.ndarray
    p: np.ndarray
    J: np.ndarray
    vel: np.ndarray
    dvel_dq: np.ndarray
    acc: np.ndarray
    dacc_dq: np.ndarray
    dacc_dv: np.ndarray

    def contact_rows(self, rows):
        """Copy restricted to the contact rows selected by ``rows``."""
        def pick(arr):
            return None if arr is None else arr[rows]

        return DynamicsPoint(self.tau, self.dtau_dq, self.dtau_dv, self.M, pick(self.p), pick(self.J),
                             pick(self.vel), pick(self.dvel_dq), pick(self.acc), pick(self.dacc_dq),
                             pick(self.dacc_dv))


def evaluate(model, q, v, a, contacts=None, forces=None, gravity=True, derivatives=True):
    """All first-order dynamics quantities from one tangent sweep.

    Without ``derivatives`` only the value fields are filled (the others
    are ``None``).
    """
    n = model.nv
    (tau, P, VP, AP, _), rf, ra = _run(model, q, v, a, contacts, forces, derivatives, gravity)
    if not derivatives:
        return DynamicsPoint(tau[:, 0].copy(), None, None, None, P[rf, ra, 0], None, VP[rf, ra, 0], None,
                             AP[rf, ra, 0], None, None)
    sq, sv, sa = slice(1, 1 + n), slice(1 + n, 1 + 2 * n), slice(1 + 2 * n, 1 + 3 * n)
    Pr, VPr, APr = P[rf, ra], VP[rf, ra], AP[rf, ra]
    return DynamicsPoint(
        tau=tau[:, 0].copy(), dtau_dq=tau[:, sq].copy(), dtau_dv=tau[:, sv].copy(), M=tau[:, sa].copy(),
        p=Pr[:, 0].copy(), J=Pr[:, sq].copy(), vel=VPr[:, 0].copy(), dvel_dq=VPr[:, sq].copy(),
        acc=APr[:, 0].copy(), dacc_dq=APr[:, sq].copy(), dacc_dv=APr[:, sv].copy(),
    )


def rnea(model, q, v, a, contacts=None, forces=None):
    """Generalized force ``M a + b - Jc' lam``."""
    (tau, _, _, _, _), _, _ = _run(model, q, v, a, contacts, forces, False)
    return tau[:, 0].copy()


def rnea_derivatives(model, q, v, a, contacts=None, forces=None):
    """``(dID/dq, dID/dv, M, dID/dlam)``."""
    pt = evaluate(model, q, v, a, contacts, forces)
    return pt.dtau_dq, pt.dtau_dv, pt.M, -pt.J.T


def mass_matrix(model, q):
    n = model.nv
    pt = evaluate(model, q, np.zeros(n), np.zeros(n), gravity=False)
    return 0.5 * (pt.M + pt.M.T)


def bias(model, q, v):
    """Coriolis, centrifugal and gravity forces ``b(q, v)``."""
    return rnea(model, q, v, np.zeros(model.nv))


def contact_positions(model, contacts, q):
    n = model.nv
    (_, P, _, _, _), rf, ra = _run(model, q, np.zeros(n), np.zeros(n), contacts, None, False)
    return P[rf, ra, 0].copy()


def contact_velocities(model, contacts, q, v):
    n = model.nv
    (_, _, VP, _, _), rf, ra = _run(model, q, v, np.zeros(n), contacts, None, False)
    return VP[rf, ra, 0].copy()


def centre_of_mass(model, q):
    n = model.nv
    (_, _, _, _, COM), _, _ = _run(model, q, np.zeros(n), np.zeros(n), None, None, False)
    m = model.mass
    return (m[:, None] * COM).sum(axis=0) / m.sum()


def kinetic_energy(model, q, v):
    return 0.5 * v @ mass_matrix(model, q) @ v


def potential_energy(model, q):
    return model.total_mass * model.gravity * centre_of_mass(model, q)[1]


@dataclass
class ContactKinematics:
    J: np.ndarray
    ac: np.ndarray
    dac_dq: np.ndarray
    dac_dv: np.ndarray
    p: np.ndarray
    vel: np.ndarray


def stabilize(pt, contacts):
    """Add the Baumgarte feedback to the raw contact acceleration."""
    kp, kd = contacts.kp, contacts.kd
    ac = pt.acc + kd * pt.vel
    if pt.J is None:
        if kp != 0.0:
            mask = np.isfinite(contacts.refs)
            ac = ac + kp * np.where(mask, pt.p - np.nan_to_num(contacts.refs), 0.0)
        return ContactKinematics(None, ac, None, None, pt.p, pt.vel)
    dq = pt.dacc_dq + kd * pt.dvel_dq
    dv = pt.dacc_dv + kd * pt.J
    if kp != 0.0:
        mask = np.isfinite(contacts.refs)
        err = np.where(mask, pt.p - np.nan_to_num(contacts.refs), 0.0)
        ac = ac + kp * err
        dq = dq + kp * (mask[:, None] * pt.J)
    return ContactKinematics(pt.J, ac, dq, dv, pt.p, pt.vel)


def contact_kinematics(model, contacts, q, v, a):
    """``(Jc, a_c, da_c/dq, da_c/dv)`` plus positions and velocities."""
    return stabilize(evaluate(model, q, v, a, contacts), contacts)


def assemble_redundant(model, actuation, contacts, q, v, a, tau, lam, swing=None):
    """Residual and Jacobians of the constraint with ``u = (a, tau, lam, lam_swing)``.

    Rows are ``ID - A tau`` (nv), the active contact accelerations and
    ``lam_swing = 0`` for the frames in ``swing``. ``lam`` stacks the
    active rows first, then the swing rows.
    """
    swing = _NO_CONTACTS if swing is None else swing
    n, nt = model.nv, actuation.ntau
    nf, ns = contacts.nf, swing.nf
    lam = np.asarray(lam, dtype=float)
    la, ls = lam[:nf], lam[nf:nf + ns]
    pt = evaluate(model, q, v, a, contacts, la)
    ck = stabilize(pt, contacts)
    A = actuation.matrix(q)
    dA_dq, _, _ = actuation.apply_derivatives(q, v, tau)
    h = np.concatenate([pt.tau - A @ tau, ck.ac, ls])
    nh = n + nf + ns
    hx = np.zeros((nh, 2 * n))
    hx[:n, :n] = pt.dtau_dq - dA_dq
    hx[:n, n:] = pt.dtau_dv
    hx[n:n + nf, :n] = ck.dac_dq
    hx[n:n + nf, n:] = ck.dac_dv
    hu = np.zeros((nh, n + nt + nf + ns))
    hu[:n, :n] = pt.M
    hu[:n, n:n + nt] = -A
    hu[:n, n + nt:n + nt + nf] = -pt.J.T
    hu[n:n + nf, :n] = pt.J
    hu[n + nf:, n + nt + nf:] = np.eye(ns)
    return h, hx, hu


def assemble_condensed(model, actuation, contacts, q, v, a, lam):
    """Residual and Jacobians of the constraint with ``u = (a, lam)``.

    The effort rows are ``U' ID`` where the columns of ``U`` are an
    orthonormal basis of the directions the actuation cannot produce
    (``U U'`` is the selection ``I - A A^+``).
    """
    n, nf = model.nv, contacts.nf
    pt = evaluate(model, q, v, a, contacts, lam)
    ck = stabilize(pt, contacts)
    U = actuation.under_basis(q)
    dU = actuation.under_basis_derivative(q)
    nua = U.shape[1]
    h = np.concatenate([U.T @ pt.tau, ck.ac])
    hx = np.zeros((nua + nf, 2 * n))
    hx[:nua, :n] = U.T @ pt.dtau_dq + np.einsum("ikj,i->kj", dU, pt.tau)
    hx[:nua, n:] = U.T @ pt.dtau_dv
    hx[nua:, :n] = ck.dac_dq
    hx[nua:, n:] = ck.dac_dv
    hu = np.zeros((nua + nf, n + nf))
    hu[:nua, :n] = U.T @ pt.M
    hu[:nua, n:] = -U.T @ pt.J.T
    hu[nua:, :n] = pt.J
    return h, hx, hu


def recover_torque(model, actuation, contacts, q, v, a, lam, derivatives=False):
    """Efforts ``A^+ ID(q, v, a, lam)`` reproducing the actuated rows of ID.

    With ``derivatives`` also returns the Jacobians with respect to
    ``q``, ``v``, ``a`` and ``lam``.
    """
    A = actuation.matrix(q)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * sv[0]:
        raise DynamicsError("effort map is rank deficient")
    P = actuation.pinv(q)
    if not derivatives:
        return P @ rnea(model, q, v, a, contacts, lam)
    pt = evaluate(model, q, v, a, contacts, lam)
    tau = P @ pt.tau
    dP = actuation.pinv_derivative(q)
    dq = P @ pt.dtau_dq + np.einsum("kij,i->kj", dP, pt.tau)
    return tau, dq, P @ pt.dtau_dv, P @ pt.M, -P @ pt.J.T


def _kkt_solve(M, J, rhs):
    n, m = M.shape[0], J.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = M
    K[:n, n:] = -J.T
    K[n:, :n] = J
    if m and np.linalg.cond(K) > KKT_COND_LIMIT:
        raise DynamicsError("contact KKT matrix is singular")
    try:
        return np.linalg.solve(K, rhs), K
    except np.linalg.LinAlgError:
        raise DynamicsError("contact KKT matrix is singular") from None


def impulse_dynamics(model, contacts, q, v_minus, derivatives=False):
    """Post-impact velocity and impulse for a perfectly inelastic touchdown.

    Solves ``M (v+ - v-) = Jc' Lambda`` with ``Jc v+ = 0``. With
    ``derivatives`` also returns ``(dv+/dq, dv+/dv-)``.
    """
    n, nf = model.nv, contacts.nf
    z = np.zeros(n)
    pt = evaluate(model, q, z, z, contacts, gravity=False)
    M, J = 0.5 * (pt.M + pt.M.T), pt.J
    rhs = np.concatenate([M @ v_minus, np.zeros(nf)])
    sol, K = _kkt_solve(M, J, rhs)
    vp, Lam = sol[:n], sol[n:]
    if not derivatives:
        return vp, Lam
    # implicit differentiation of the KKT residual
    r1 = evaluate(model, q, z, vp - v_minus, contacts, Lam, gravity=False)
    r2 = evaluate(model, q, vp, z, contacts, gravity=False)
    dR_dq = np.vstack([r1.dtau_dq, r2.dvel_dq])
    dR_dv = np.vstack([-M, np.zeros((nf, n))])
    Kinv = np.linalg.inv(K)
    dvp_dq = -(Kinv @ dR_dq)[:n]
    dvp_dv = -(Kinv @ dR_dv)[:n]
    return vp, Lam, dvp_dq, dvp_dv


def contact_forward_dynamics(model, contacts, q, v, tau, derivatives=False):
    """Accelerations and contact forces for applied generalized forces ``tau``.

    Solves ``M a - Jc' lam = tau - b`` with ``a_c(q, v, a) = 0``. With
    ``derivatives`` also returns ``(da/dq, da/dv, da/dtau, dlam/dq,
    dlam/dv, dlam/dtau)``.
    """
    contacts = _NO_CONTACTS if contacts is None else contacts
    n, nf = model.nv, contacts.nf
    z = np.zeros(n)
    pt0 = evaluate(model, q, v, z, contacts)
    ck0 = stabilize(pt0, contacts)
    M = 0.5 * (pt0.M + pt0.M.T)
    rhs = np.concatenate([tau - pt0.tau, -ck0.ac])
    sol, K = _kkt_solve(M, pt0.J, rhs)
    acc, lam = sol[:n], sol[n:]
    if not derivatives:
        return acc, lam
    pt = evaluate(model, q, v, acc, contacts, lam)
    ck = stabilize(pt, contacts)
    dR_dq = np.vstack([pt.dtau_dq, ck.dac_dq])
    dR_dv = np.vstack([pt.dtau_dv, ck.dac_dv])
    dR_dt = np.vstack([-np.eye(n), np.zeros((nf, n))])
    Kinv = np.linalg.inv(K)
    dq = -Kinv @ dR_dq
    dv = -Kinv @ dR_dv
    dt = -Kinv @ dR_dt
    return acc, lam, dq[:n], dv[:n], dt[:n], dq[n:], dv[n:], dt[n:]
