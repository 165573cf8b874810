"""Per-node kernels of the backward recursion.

Each kernel handles one node; the Python driver in :mod:`eqddp.solver`
walks the horizon. Shapes are fixed per call so the same source runs under
numba and plain numpy.
"""
import numpy as np

from ._accel import kernel
from .factorizations import cho_solve, cholesky, lu_full_pivot_basis, lu_solve_checked, qr_col_pivot_basis

LU_FULL_PIVOT = 0
QR_COL_PIVOT = 1


@kernel
def action_value(lx, lu, Lxx, Lxu, Luu, fx, fu, na, f_gap, Vx_next, Vxx_next, mu):
    """Q-function blocks with the gap-deflected value gradient.

    Only the first ``na`` columns of ``fu`` are used; the rest are treated as
    structural zeros. ``mu`` adds ``mu fx'fx`` to the next Hessian and ``mu I``
    to the control Hessian.
    """
    nu = lu.shape[0]
    Vx_plus = Vx_next + Vxx_next @ f_gap
    Vr = Vxx_next.copy()
    if mu > 0.0:
        Vr += mu * (fx.T @ fx)
    Qx = lx + fx.T @ Vx_plus
    FV = fx.T @ Vr
    Qxx = Lxx + FV @ fx
    Qu = lu.copy()
    Qux = np.ascontiguousarray(Lxu.T)
    Quu = Luu.copy()
    for i in range(nu):
        Quu[i, i] += mu
    if na > 0:
        fa = np.ascontiguousarray(fu[:, :na])
        FaV = fa.T @ Vr
        Qu[:na] += fa.T @ Vx_plus
        Qux[:na, :] += FaV @ fx
        Quu[:na, :na] += FaV @ fa
    return Qx, Qu, Qxx, Qux, Quu


@kernel
def value_update(Qx, Qu, Qxx, Qux, Quu, pi, Pi):
    """Quadratic value model after substituting ``du = -pi - Pi dx``."""
    nu = Qu.shape[0]
    if nu == 0:
        return Qx.copy(), 0.5 * (Qxx + Qxx.T), 0.0, 0.0
    Quu_pi = Quu @ pi
    Vx = Qx + Pi.T @ (Quu_pi - Qu) - Qux.T @ pi
    QuuPi = Quu @ Pi
    Vxx = Qxx + Pi.T @ QuuPi - Qux.T @ Pi - Pi.T @ Qux
    Vxx = 0.5 * (Vxx + Vxx.T)
    dV1 = -(pi @ Qu)
    dV2 = pi @ Quu_pi
    return Vx, Vxx, dV1, dV2


@kernel
def nullspace_policy(Qu, Qux, Quu, Z, psi_h, psi_hx):
    """Policy from the reduced system on the constraint kernel.

    ``pi = psi_h + Z Qzz^-1 Z'(Qu - Quu psi_h)`` and likewise for ``Pi``,
    which equals ``Z k + (I - Z Qzz^-1 Z'Quu) psi_h``. Returns the policy,
    a success flag and the size of the factorized block.
    """
    nu = Qu.shape[0]
    nx = Qux.shape[1]
    nz = Z.shape[1]
    pi = psi_h.copy()
    Pi = psi_hx.copy()
    if nz == 0:
        return pi, Pi, True, 0
    QuuZ = Quu @ Z
    Qzz = Z.T @ QuuZ
    L, ok = cholesky(Qzz)
    if not ok:
        return pi, Pi, False, nz
    rhs = np.empty((nz, nx + 1))
    rhs[:, 0] = Z.T @ (Qu - Quu @ psi_h)
    rhs[:, 1:] = Z.T @ (Qux - Quu @ psi_hx)
    sol = cho_solve(L, rhs)
    zsol = Z @ sol
    pi += zsol[:, 0]
    Pi += zsol[:, 1:]
    return pi, Pi, True, nz


@kernel
def schur_policy(Qu, Qux, Quu, hx, hu, h_gap):
    """Policy and multipliers through the Schur complement of ``Quu``.

    Returns ``(pi, Pi, gamma_ff, gamma_fb, ok, dim_u, dim_h)`` where the
    multiplier of the node constraint is ``gamma_ff + gamma_fb dx``.
    """
    nu = Qu.shape[0]
    nx = Qux.shape[1]
    nh = hu.shape[0]
    gff = np.zeros(nh)
    gfb = np.zeros((nh, nx))
    pi = np.zeros(nu)
    Pi = np.zeros((nu, nx))
    if nu == 0:
        return pi, Pi, gff, gfb, True, 0, 0
    L, ok = cholesky(Quu)
    if not ok:
        return pi, Pi, gff, gfb, False, nu, 0
    rhs = np.empty((nu, 1 + nx + nh))
    rhs[:, 0] = Qu
    rhs[:, 1:1 + nx] = Qux
    rhs[:, 1 + nx:] = hu.T
    sol = cho_solve(L, rhs)
    k = sol[:, 0].copy()
    K = np.ascontiguousarray(sol[:, 1:1 + nx])
    if nh == 0:
        return k, K, gff, gfb, True, nu, 0
    psi = np.ascontiguousarray(sol[:, 1 + nx:])
    H = hu @ psi
    H = 0.5 * (H + H.T)
    LH, okh = cholesky(H)
    if not okh:
        return pi, Pi, gff, gfb, False, nu, nh
    rhs2 = np.empty((nh, 1 + nx))
    rhs2[:, 0] = h_gap - hu @ k
    rhs2[:, 1:] = hx - hu @ K
    g = cho_solve(LH, rhs2)
    gff = g[:, 0].copy()
    gfb = np.ascontiguousarray(g[:, 1:])
    pi = k + psi @ gff
    Pi = K + psi @ gfb
    # one refinement sweep of the saddle system: the policy is a small
    # difference of large terms when the node is (nearly) fully constrained
    P = np.empty((nu, 1 + nx))
    P[:, 0] = pi
    P[:, 1:] = Pi
    G = np.empty((nh, 1 + nx))
    G[:, 0] = gff
    G[:, 1:] = gfb
    R1 = rhs[:, :1 + nx] - Quu @ P + hu.T @ G
    W = cho_solve(L, R1)
    HX = np.empty((nh, 1 + nx))
    HX[:, 0] = h_gap
    HX[:, 1:] = hx
    R2 = HX - hu @ P - hu @ W
    dG = cho_solve(LH, R2)
    P = P + W + psi @ dG
    G = G + dG
    pi = P[:, 0].copy()
    Pi = np.ascontiguousarray(P[:, 1:])
    gff = G[:, 0].copy()
    gfb = np.ascontiguousarray(G[:, 1:])
    return pi, Pi, gff, gfb, True, nu, nh


@kernel
def nullspace_precompute(hu, hx, h_gap, method):
    """Kernel basis and the particular solutions ``Y (hu Y)^-1 [h_gap, hx]``.

    Returns ``(Y, Z, psi_h, psi_hx, rank, ok)``.
    """
    nh, nu = hu.shape
    nx = hx.shape[1]
    if method == LU_FULL_PIVOT:
        Y, Z, rank = lu_full_pivot_basis(hu)
    else:
        Y, Z, rank = qr_col_pivot_basis(hu)
    psi_h = np.zeros(nu)
    psi_hx = np.zeros((nu, nx))
    if rank < nh:
        return Y, Z, psi_h, psi_hx, rank, False
    huY = hu @ Y
    rhs = np.empty((nh, 1 + nx))
    rhs[:, 0] = h_gap
    rhs[:, 1:] = hx
    sol, ok = lu_solve_checked(huY, rhs)
    if not ok:
        return Y, Z, psi_h, psi_hx, rank, False
    ysol = Y @ sol
    psi_h = ysol[:, 0].copy()
    psi_hx = np.ascontiguousarray(ysol[:, 1:])
    return Y, Z, psi_h, psi_hx, rank, True
