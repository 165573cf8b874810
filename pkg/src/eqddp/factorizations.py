"""Dense factorizations used by the backward pass.

Failures are reported through return values (``None`` at the public layer,
an ``ok`` flag inside kernels) so the solver can react by regularizing.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, kernel

RANK_TOL = 1e-10
COND_MAX = 1e12

if USE_NUMBA:

    @kernel
    def cholesky(A):
        n = A.shape[0]
        L = np.zeros((n, n))
        for j in range(n):
            s = A[j, j]
            for k in range(j):
                s -= L[j, k] * L[j, k]
            if not s > 0.0:
                return L, False
            d = np.sqrt(s)
            L[j, j] = d
            for i in range(j + 1, n):
                t = A[i, j]
                for k in range(j):
                    t -= L[i, k] * L[j, k]
                L[i, j] = t / d
        return L, True

    @kernel
    def cho_solve(L, B):
        n = L.shape[0]
        m = B.shape[1]
        X = B.copy()
        for c in range(m):
            for i in range(n):
                t = X[i, c]
                for k in range(i):
                    t -= L[i, k] * X[k, c]
                X[i, c] = t / L[i, i]
            for i in range(n - 1, -1, -1):
                t = X[i, c]
                for k in range(i + 1, n):
                    t -= L[k, i] * X[k, c]
                X[i, c] = t / L[i, i]
        return X

    @kernel
    def lu_solve_checked(A, B):
        n = A.shape[0]
        m = B.shape[1]
        LU = A.copy()
        X = B.copy()
        anorm = 0.0
        for j in range(n):
            s = 0.0
            for i in range(n):
                s += abs(A[i, j])
            anorm = max(anorm, s)
        piv = np.arange(n)
        for k in range(n):
            p = k
            best = abs(LU[k, k])
            for i in range(k + 1, n):
                if abs(LU[i, k]) > best:
                    best = abs(LU[i, k])
                    p = i
            if best == 0.0:
                return X, False
            if p != k:
                for j in range(n):
                    t = LU[k, j]
                    LU[k, j] = LU[p, j]
                    LU[p, j] = t
                t2 = piv[k]
                piv[k] = piv[p]
                piv[p] = t2
            for i in range(k + 1, n):
                LU[i, k] /= LU[k, k]
                f = LU[i, k]
                for j in range(k + 1, n):
                    LU[i, j] -= f * LU[k, j]
        # 1-norm condition via the explicit inverse (matrices here are tiny)
        inv = np.zeros((n, n))
        for c in range(n):
            col = np.zeros(n)
            for i in range(n):
                col[i] = 1.0 if piv[i] == c else 0.0
            for i in range(n):
                for k in range(i):
                    col[i] -= LU[i, k] * col[k]
            for i in range(n - 1, -1, -1):
                for k in range(i + 1, n):
                    col[i] -= LU[i, k] * col[k]
                col[i] /= LU[i, i]
            for i in range(n):
                inv[i, c] = col[i]
        inorm = 0.0
        for j in range(n):
            s = 0.0
            for i in range(n):
                s += abs(inv[i, j])
            inorm = max(inorm, s)
        if n > 0 and anorm * inorm > 1e12:
            return X, False
        return inv @ B if n > 0 else X, True

else:
    from scipy.linalg import cho_solve as _sp_cho_solve
    from scipy.linalg import lapack as _lapack
    from scipy.linalg import lu_factor as _lu_factor
    from scipy.linalg import lu_solve as _lu_solve

    def cholesky(A):
        try:
            return np.linalg.cholesky(A), True
        except np.linalg.LinAlgError:
            return np.zeros_like(A), False

    def cho_solve(L, B):
        if L.shape[0] == 0:
            return B.copy()
        return _sp_cho_solve((L, True), B, check_finite=False)

    def lu_solve_checked(A, B):
        n = A.shape[0]
        if n == 0:
            return B.copy(), True
        lu, piv = _lu_factor(A, check_finite=False)
        if np.any(np.diag(lu) == 0.0):
            return B.copy(), False
        rcond, info = _lapack.dgecon(lu, np.linalg.norm(A, 1), norm="1")
        if info != 0 or rcond * 1e12 < 1.0:
            return B.copy(), False
        return _lu_solve((lu, piv), B, check_finite=False), True


@kernel
def lu_full_pivot_basis(hu):
    """Rank-revealing LU with complete pivoting of an ``nh x nu`` matrix.

    Returns ``(Y, Z, rank)`` where ``Z`` spans the kernel of ``hu`` and ``Y``
    holds the pivot columns of the identity.
    """
    nh, nu = hu.shape
    U = hu.copy()
    cols = np.arange(nu)
    rank = 0
    scale = 0.0
    for k in range(min(nh, nu)):
        sub = np.abs(U[k:, k:])
        flat = np.argmax(sub)
        pi = k + flat // (nu - k)
        pj = k + flat % (nu - k)
        piv = abs(U[pi, pj])
        if k == 0:
            scale = piv
        if piv <= RANK_TOL * scale or piv == 0.0:
            break
        if pi != k:
            tmp = U[k, :].copy()
            U[k, :] = U[pi, :]
            U[pi, :] = tmp
        if pj != k:
            tmpc = U[:, k].copy()
            U[:, k] = U[:, pj]
            U[:, pj] = tmpc
            t = cols[k]
            cols[k] = cols[pj]
            cols[pj] = t
        for i in range(k + 1, nh):
            f = U[i, k] / U[k, k]
            U[i, k:] -= f * U[k, k:]
        rank += 1
    r = rank
    nz = nu - r
    # back substitution U1 W = U2 for the free columns
    W = np.zeros((r, nz))
    for c in range(nz):
        for i in range(r - 1, -1, -1):
            t = U[i, r + c]
            for j in range(i + 1, r):
                t -= U[i, j] * W[j, c]
            W[i, c] = t / U[i, i]
    Z = np.zeros((nu, nz))
    for c in range(nz):
        for i in range(r):
            Z[cols[i], c] = -W[i, c]
        Z[cols[r + c], c] = 1.0
    Y = np.zeros((nu, r))
    for i in range(r):
        Y[cols[i], i] = 1.0
    return Y, Z, r


@kernel
def qr_col_pivot_basis(hu):
    """Householder QR with column pivoting applied to ``hu.T``.

    Returns ``(Y, Z, rank)`` with orthonormal ``Y`` (range of ``hu.T``) and
    orthonormal ``Z`` (kernel of ``hu``).
    """
    nh, nu = hu.shape
    R = hu.T.copy()
    Q = np.eye(nu)
    rank = 0
    scale = 0.0
    for k in range(min(nu, nh)):
        best = -1.0
        p = k
        for j in range(k, nh):
            s = 0.0
            for i in range(k, nu):
                s += R[i, j] * R[i, j]
            if s > best:
                best = s
                p = j
        if p != k:
            tmpc = R[:, k].copy()
            R[:, k] = R[:, p]
            R[:, p] = tmpc
        norm = np.sqrt(best)
        if k == 0:
            scale = norm
        if norm <= RANK_TOL * scale or norm == 0.0:
            break
        x = R[k:, k].copy()
        alpha = -norm if x[0] >= 0.0 else norm
        x[0] -= alpha
        vnorm = np.sqrt(np.dot(x, x))
        if vnorm > 0.0:
            x /= vnorm
            R[k:, :] -= 2.0 * np.outer(x, x @ R[k:, :])
            Q[:, k:] -= 2.0 * np.outer(Q[:, k:] @ x, x)
        rank += 1
    return Q[:, :rank].copy(), Q[:, rank:].copy(), rank


@dataclass
class BasisPair:
    Y: np.ndarray
    Z: np.ndarray
    rank: int


BASIS_METHODS = ("lu-full-pivot", "qr-col-pivot")


def spd_solve(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``.

    Returns ``None`` when ``A`` is not positive definite.
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    B2 = np.ascontiguousarray(B.reshape(B.shape[0], -1))
    L, ok = cholesky(A)
    if not ok:
        return None
    X = cho_solve(L, B2)
    return X.ravel() if vec else X


def square_solve(A, B):
    """Solve ``A X = B`` with partial-pivoting LU; ``None`` if numerically singular."""
    A = np.ascontiguousarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("square_solve needs a square matrix")
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    B2 = np.ascontiguousarray(B.reshape(B.shape[0], -1))
    X, ok = lu_solve_checked(A, B2)
    if not ok:
        return None
    return X.ravel() if vec else X


def basis_decompose(hu, method="lu-full-pivot"):
    """Split the control space into a range companion ``Y`` and a kernel basis ``Z``."""
    hu = np.ascontiguousarray(np.atleast_2d(hu), dtype=float)
    nh, nu = hu.shape
    if nh > nu:
        raise ValueError(f"constraint has more rows ({nh}) than controls ({nu})")
    if nh == 0:
        return BasisPair(np.zeros((nu, 0)), np.eye(nu), 0)
    if method == "lu-full-pivot":
        Y, Z, r = lu_full_pivot_basis(hu)
    elif method == "qr-col-pivot":
        Y, Z, r = qr_col_pivot_basis(hu)
    else:
        raise ValueError(f"unknown basis method {method!r}")
    return BasisPair(Y, Z, int(r))
