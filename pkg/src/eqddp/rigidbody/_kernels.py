"""Recursive Newton-Euler sweep for planar trees with forward-mode tangents.

Every scalar is stored as a vector ``[value, d/dq.., d/dv.., d/da..]`` (or
just ``[value]`` when derivatives are not requested), so one sweep returns the
generalized forces together with their exact configuration, velocity and
acceleration Jacobians (the last one being the mass matrix). Quantities are expressed in the world frame ``(x, z)``.
"""
import numpy as np

from .._accel import kernel


@kernel
def _mul(a, b):
    out = a[0] * b + b[0] * a
    out[0] = a[0] * b[0]
    return out


@kernel
def _cross(ax, az, bx, bz):
    # planar cross product a x b (scalar)
    return _mul(ax, bz) - _mul(az, bx)


@kernel
def sweep(parent, jtype, jpos, jangle, jaxis, mass, com, inertia,
          q, v, a, gravity, cbody, cpos, lam, deriv):
    """Inverse dynamics plus contact-point kinematics.

    Returns ``(tau, P, VP, AP, COM)``: generalized forces ``(n, K)``, contact
    point position, velocity and acceleration ``(nc, 2, K)`` and the world
    centre-of-mass of every body ``(n, 2)`` (values only).
    """
    n = q.shape[0]
    nc = cbody.shape[0]
    K = 1 + 3 * n if deriv else 1
    phi = np.zeros((n, K))
    cs = np.zeros((n, K))
    sn = np.zeros((n, K))
    w = np.zeros((n, K))
    al = np.zeros((n, K))
    o = np.zeros((n, 2, K))
    vo = np.zeros((n, 2, K))
    ao = np.zeros((n, 2, K))
    fx = np.zeros((n, K))
    fz = np.zeros((n, K))
    mom = np.zeros((n, K))
    ex = np.zeros((n, K))
    ez = np.zeros((n, K))
    COM = np.zeros((n, 2))
    zero = np.zeros(K)
    one = np.zeros(K)
    one[0] = 1.0
    g_up = np.zeros(K)
    g_up[0] = gravity
    for i in range(n):
        p = parent[i]
        qi = np.zeros(K)
        qi[0] = q[i]
        vi = np.zeros(K)
        vi[0] = v[i]
        ai = np.zeros(K)
        ai[0] = a[i]
        if deriv:
            qi[1 + i] = 1.0
            vi[1 + n + i] = 1.0
            ai[1 + 2 * n + i] = 1.0
        if p < 0:
            phip = zero
            cp = one
            sp = zero
            wp = zero
            alp = zero
            opx = zero
            opz = zero
            vpx = zero
            vpz = zero
            apx = zero
            apz = g_up
        else:
            phip = phi[p]
            cp = cs[p]
            sp = sn[p]
            wp = w[p]
            alp = al[p]
            opx = o[p, 0]
            opz = o[p, 1]
            vpx = vo[p, 0]
            vpz = vo[p, 1]
            apx = ao[p, 0]
            apz = ao[p, 1]
        rx = cp * jpos[i, 0] - sp * jpos[i, 1]
        rz = sp * jpos[i, 0] + cp * jpos[i, 1]
        if jtype[i] == 0:
            phi[i] = phip + qi
            w[i] = wp + vi
            al[i] = alp + ai
        else:
            phi[i] = phip
            w[i] = wp
            al[i] = alp
        phi[i, 0] += jangle[i]
        c = np.cos(phi[i, 0]) * one
        s = np.sin(phi[i, 0]) * one
        if deriv:
            c[1:] = -np.sin(phi[i, 0]) * phi[i, 1:]
            s[1:] = np.cos(phi[i, 0]) * phi[i, 1:]
        cs[i] = c
        sn[i] = s
        w2 = _mul(wp, wp)
        if jtype[i] == 0:
            o[i, 0] = opx + rx
            o[i, 1] = opz + rz
            vo[i, 0] = vpx - _mul(wp, rz)
            vo[i, 1] = vpz + _mul(wp, rx)
            ao[i, 0] = apx - _mul(alp, rz) - _mul(w2, rx)
            ao[i, 1] = apz + _mul(alp, rx) - _mul(w2, rz)
        else:
            e_x = c * jaxis[i, 0] - s * jaxis[i, 1]
            e_z = s * jaxis[i, 0] + c * jaxis[i, 1]
            ex[i] = e_x
            ez[i] = e_z
            relx = rx + _mul(e_x, qi)
            relz = rz + _mul(e_z, qi)
            o[i, 0] = opx + relx
            o[i, 1] = opz + relz
            vo[i, 0] = vpx - _mul(wp, relz) + _mul(e_x, vi)
            vo[i, 1] = vpz + _mul(wp, relx) + _mul(e_z, vi)
            wv = _mul(wp, vi)
            ao[i, 0] = (apx - _mul(alp, relz) - _mul(w2, relx) - 2.0 * _mul(wv, e_z) + _mul(e_x, ai))
            ao[i, 1] = (apz + _mul(alp, relx) - _mul(w2, relz) + 2.0 * _mul(wv, e_x) + _mul(e_z, ai))
        # centre of mass and body wrench about the body origin
        cwx = c * com[i, 0] - s * com[i, 1]
        cwz = s * com[i, 0] + c * com[i, 1]
        COM[i, 0] = o[i, 0, 0] + cwx[0]
        COM[i, 1] = o[i, 1, 0] + cwz[0]
        wi2 = _mul(w[i], w[i])
        acx = ao[i, 0] - _mul(al[i], cwz) - _mul(wi2, cwx)
        acz = ao[i, 1] + _mul(al[i], cwx) - _mul(wi2, cwz)
        Fx = mass[i] * acx
        Fz = mass[i] * acz
        fx[i] = Fx
        fz[i] = Fz
        mom[i] = inertia[i] * al[i] + _cross(cwx, cwz, Fx, Fz)
    P = np.zeros((nc, 2, K))
    VP = np.zeros((nc, 2, K))
    AP = np.zeros((nc, 2, K))
    for ci in range(nc):
        b = cbody[ci]
        c = cs[b]
        s = sn[b]
        pcx = c * cpos[ci, 0] - s * cpos[ci, 1]
        pcz = s * cpos[ci, 0] + c * cpos[ci, 1]
        P[ci, 0] = o[b, 0] + pcx
        P[ci, 1] = o[b, 1] + pcz
        VP[ci, 0] = vo[b, 0] - _mul(w[b], pcz)
        VP[ci, 1] = vo[b, 1] + _mul(w[b], pcx)
        wb2 = _mul(w[b], w[b])
        AP[ci, 0] = ao[b, 0] - _mul(al[b], pcz) - _mul(wb2, pcx)
        AP[ci, 1] = ao[b, 1] + _mul(al[b], pcx) - _mul(wb2, pcz)
        AP[ci, 1, 0] -= gravity
        # contact force lam acts on the body at the contact point
        fx[b, 0] -= lam[ci, 0]
        fz[b, 0] -= lam[ci, 1]
        lx = lam[ci, 0] * one
        lz = lam[ci, 1] * one
        mom[b] -= _cross(pcx, pcz, lx, lz)
    tau = np.zeros((n, K))
    for i in range(n - 1, -1, -1):
        if jtype[i] == 0:
            tau[i] = mom[i]
        else:
            tau[i] = _mul(fx[i], ex[i]) + _mul(fz[i], ez[i])
        p = parent[i]
        if p >= 0:
            dx = o[i, 0] - o[p, 0]
            dz = o[i, 1] - o[p, 1]
            fx[p] += fx[i]
            fz[p] += fz[i]
            mom[p] += mom[i] + _cross(dx, dz, fx[i], fz[i])
    return tau, P, VP, AP, COM
