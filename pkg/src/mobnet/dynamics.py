"""Rigid-body dynamics of kinematic trees.

All quantities are expressed in the world frame with spatial vectors taken
about the world origin and ordered ``[angular; linear]``. Bodies are indexed
by generalized coordinate (one joint per body) and are stored parent-first,
so a single forward sweep computes kinematics and a single backward sweep
accumulates forces.

Wrenches passed in and out of the public API are 6-vectors ``[force; moment]``
applied at a point, matching the ``[linear; angular]`` row order of
:func:`contact_jacobian`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import ModelError, RobotModel

FD_STEP = 1e-6


@dataclass(frozen=True)
class PointWrench:
    """A wrench ``[force; moment]`` (world axes) acting at a point fixed in a link."""

    link: str
    point: tuple
    wrench: np.ndarray


# ---------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True)
def _skew(v):
    m = np.zeros((3, 3))
    m[0, 1] = -v[2]
    m[0, 2] = v[1]
    m[1, 0] = v[2]
    m[1, 2] = -v[0]
    m[2, 0] = -v[1]
    m[2, 1] = v[0]
    return m


@nb.njit(cache=True)
def _kinematics(parent, jtype, axis, rot_tree, pos_tree, q):
    """Body rotations, origins, and world-frame motion subspaces."""
    n = q.shape[0]
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    S = np.zeros((n, 6))
    Rj = np.empty((3, 3))
    E = np.empty((3, 3))
    o = np.empty(3)
    for i in range(n):
        k = parent[i]
        for r in range(3):
            for c in range(3):
                s = 0.0
                if k >= 0:
                    for m in range(3):
                        s += R[k, r, m] * rot_tree[i, m, c]
                else:
                    s = rot_tree[i, r, c]
                Rj[r, c] = s
            if k >= 0:
                o[r] = p[k, r] + R[k, r, 0] * pos_tree[i, 0] + R[k, r, 1] * pos_tree[i, 1] + R[k, r, 2] * pos_tree[i, 2]
            else:
                o[r] = pos_tree[i, r]
        ax, ay, az = axis[i, 0], axis[i, 1], axis[i, 2]
        a0 = Rj[0, 0] * ax + Rj[0, 1] * ay + Rj[0, 2] * az
        a1 = Rj[1, 0] * ax + Rj[1, 1] * ay + Rj[1, 2] * az
        a2 = Rj[2, 0] * ax + Rj[2, 1] * ay + Rj[2, 2] * az
        if jtype[i] == 0:
            # Rodrigues rotation about the joint axis
            c_ = np.cos(q[i])
            s_ = np.sin(q[i])
            t_ = 1.0 - c_
            E[0, 0] = c_ + t_ * ax * ax
            E[0, 1] = t_ * ax * ay - s_ * az
            E[0, 2] = t_ * ax * az + s_ * ay
            E[1, 0] = t_ * ax * ay + s_ * az
            E[1, 1] = c_ + t_ * ay * ay
            E[1, 2] = t_ * ay * az - s_ * ax
            E[2, 0] = t_ * ax * az - s_ * ay
            E[2, 1] = t_ * ay * az + s_ * ax
            E[2, 2] = c_ + t_ * az * az
            for r in range(3):
                for c in range(3):
                    R[i, r, c] = Rj[r, 0] * E[0, c] + Rj[r, 1] * E[1, c] + Rj[r, 2] * E[2, c]
                p[i, r] = o[r]
            S[i, 0] = a0
            S[i, 1] = a1
            S[i, 2] = a2
            S[i, 3] = o[1] * a2 - o[2] * a1
            S[i, 4] = o[2] * a0 - o[0] * a2
            S[i, 5] = o[0] * a1 - o[1] * a0
        else:
            for r in range(3):
                for c in range(3):
                    R[i, r, c] = Rj[r, c]
            p[i, 0] = o[0] + a0 * q[i]
            p[i, 1] = o[1] + a1 * q[i]
            p[i, 2] = o[2] + a2 * q[i]
            S[i, 3] = a0
            S[i, 4] = a1
            S[i, 5] = a2
    return R, p, S


@nb.njit(cache=True)
def _body_inertias(R, p, mass, com, inertia):
    """Spatial inertias about the origin in compact form.

    Returns ``(Ib, h, m)`` where ``Ib`` is the rotational inertia about the
    origin, ``h = m c`` the first mass moment and ``m`` the mass, so that
    ``I [w; v] = [Ib w + h x v; m v - h x w]``.
    """
    n = mass.shape[0]
    Ib = np.zeros((n, 3, 3))
    h = np.zeros((n, 3))
    m = mass.copy()
    T = np.empty((3, 3))
    c = np.empty(3)
    for i in range(n):
        mi = mass[i]
        if mi == 0.0:
            continue
        for r in range(3):
            c[r] = p[i, r] + R[i, r, 0] * com[i, 0] + R[i, r, 1] * com[i, 1] + R[i, r, 2] * com[i, 2]
            for k in range(3):
                T[r, k] = R[i, r, 0] * inertia[i, 0, k] + R[i, r, 1] * inertia[i, 1, k] + R[i, r, 2] * inertia[i, 2, k]
        cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
        for r in range(3):
            h[i, r] = mi * c[r]
            for k in range(3):
                v = T[r, 0] * R[i, k, 0] + T[r, 1] * R[i, k, 1] + T[r, 2] * R[i, k, 2]
                v -= mi * c[r] * c[k]
                if r == k:
                    v += mi * cc
                Ib[i, r, k] = v
    return Ib, h, m


@nb.njit(cache=True)
def _imul(Ib, h, m, i, v, out):
    """out = I_i v for a spatial motion vector v."""
    w0, w1, w2, l0, l1, l2 = v[0], v[1], v[2], v[3], v[4], v[5]
    h0, h1, h2 = h[i, 0], h[i, 1], h[i, 2]
    out[0] = Ib[i, 0, 0] * w0 + Ib[i, 0, 1] * w1 + Ib[i, 0, 2] * w2 + h1 * l2 - h2 * l1
    out[1] = Ib[i, 1, 0] * w0 + Ib[i, 1, 1] * w1 + Ib[i, 1, 2] * w2 + h2 * l0 - h0 * l2
    out[2] = Ib[i, 2, 0] * w0 + Ib[i, 2, 1] * w1 + Ib[i, 2, 2] * w2 + h0 * l1 - h1 * l0
    out[3] = m[i] * l0 - (h1 * w2 - h2 * w1)
    out[4] = m[i] * l1 - (h2 * w0 - h0 * w2)
    out[5] = m[i] * l2 - (h0 * w1 - h1 * w0)


@nb.njit(cache=True)
def _crba_kernel(parent, S, Ib, h, m):
    """Mass matrix from kinematics and body inertias (the inertias are accumulated in place)."""
    n = S.shape[0]
    for i in range(n - 1, -1, -1):
        k = parent[i]
        if k >= 0:
            for r in range(3):
                h[k, r] += h[i, r]
                for c in range(3):
                    Ib[k, r, c] += Ib[i, r, c]
            m[k] += m[i]
    M = np.zeros((n, n))
    F = np.empty(6)
    for i in range(n):
        _imul(Ib, h, m, i, S[i], F)
        j = i
        while j >= 0:
            v = 0.0
            for r in range(6):
                v += S[j, r] * F[r]
            M[i, j] = v
            M[j, i] = v
            j = parent[j]
    return M


@nb.njit(cache=True)
def _crba(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, q):
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    Ib, h, m = _body_inertias(R, p, mass, com, inertia)
    return _crba_kernel(parent, S, Ib, h, m)


@nb.njit(cache=True)
def _rnea_kernel(parent, S, Ib, h, m, gravity, qd, qdd, fext, use_gravity):
    n = S.shape[0]
    v = np.zeros((n, 6))
    a = np.zeros((n, 6))
    f = np.zeros((n, 6))
    Iv = np.empty(6)
    Ia = np.empty(6)
    for i in range(n):
        k = parent[i]
        qi = qd[i]
        for r in range(6):
            if k >= 0:
                v[i, r] = v[k, r] + S[i, r] * qi
                a[i, r] = a[k, r] + S[i, r] * qdd[i]
            else:
                v[i, r] = S[i, r] * qi
                a[i, r] = S[i, r] * qdd[i]
        if k < 0 and use_gravity:
            a[i, 3] -= gravity[0]
            a[i, 4] -= gravity[1]
            a[i, 5] -= gravity[2]
        # a += v x (S qd)
        w0, w1, w2, l0, l1, l2 = v[i, 0], v[i, 1], v[i, 2], v[i, 3], v[i, 4], v[i, 5]
        u0, u1, u2 = S[i, 0] * qi, S[i, 1] * qi, S[i, 2] * qi
        u3, u4, u5 = S[i, 3] * qi, S[i, 4] * qi, S[i, 5] * qi
        a[i, 0] += w1 * u2 - w2 * u1
        a[i, 1] += w2 * u0 - w0 * u2
        a[i, 2] += w0 * u1 - w1 * u0
        a[i, 3] += w1 * u5 - w2 * u4 + l1 * u2 - l2 * u1
        a[i, 4] += w2 * u3 - w0 * u5 + l2 * u0 - l0 * u2
        a[i, 5] += w0 * u4 - w1 * u3 + l0 * u1 - l1 * u0
        _imul(Ib, h, m, i, v[i], Iv)
        _imul(Ib, h, m, i, a[i], Ia)
        # f = I a + v x* I v - fext
        f[i, 0] = Ia[0] + w1 * Iv[2] - w2 * Iv[1] + l1 * Iv[5] - l2 * Iv[4] - fext[i, 0]
        f[i, 1] = Ia[1] + w2 * Iv[0] - w0 * Iv[2] + l2 * Iv[3] - l0 * Iv[5] - fext[i, 1]
        f[i, 2] = Ia[2] + w0 * Iv[1] - w1 * Iv[0] + l0 * Iv[4] - l1 * Iv[3] - fext[i, 2]
        f[i, 3] = Ia[3] + w1 * Iv[5] - w2 * Iv[4] - fext[i, 3]
        f[i, 4] = Ia[4] + w2 * Iv[3] - w0 * Iv[5] - fext[i, 4]
        f[i, 5] = Ia[5] + w0 * Iv[4] - w1 * Iv[3] - fext[i, 5]
    tau = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = 0.0
        for r in range(6):
            s += S[i, r] * f[i, r]
        tau[i] = s
        k = parent[i]
        if k >= 0:
            for r in range(6):
                f[k, r] += f[i, r]
    return tau


@nb.njit(cache=True)
def _rnea(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd, qdd, fext, use_gravity):
    """Inverse dynamics; ``fext`` holds per-body spatial forces [moment; force] about the origin."""
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    Ib, h, m = _body_inertias(R, p, mass, com, inertia)
    return _rnea_kernel(parent, S, Ib, h, m, gravity, qd, qdd, fext, use_gravity)


@nb.njit(cache=True)
def _mass_and_bias(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd, fext):
    """``M(q)`` and ``C qd + g - tau_ext`` sharing one kinematics pass."""
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    Ib, h, m = _body_inertias(R, p, mass, com, inertia)
    bias = _rnea_kernel(parent, S, Ib, h, m, gravity, qd, np.zeros(q.shape[0]), fext, True)
    M = _crba_kernel(parent, S, Ib, h, m)
    return M, bias


@nb.njit(cache=True)
def _forward(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd, tau, fext):
    M, bias = _mass_and_bias(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd, fext)
    L = np.linalg.cholesky(M)
    y = _lower_solve(L, tau - bias)
    return _upper_solve_t(L, y)


@nb.njit(cache=True)
def _lower_solve(L, b):
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    return y


@nb.njit(cache=True)
def _upper_solve_t(L, y):
    n = y.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@nb.njit(cache=True)
def _beta_momentum(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd, step):
    """``Mdot qd - (C qd + g)`` with ``Mdot`` by a central difference along ``qd``."""
    n = q.shape[0]
    Mp = _crba(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, q + step * qd)
    Mm = _crba(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, q - step * qd)
    bias = _rnea(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, gravity, q, qd,
                 np.zeros(n), np.zeros((n, 6)), True)
    out = np.empty(n)
    inv = 0.5 / step
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += (Mp[i, j] - Mm[i, j]) * qd[j]
        out[i] = s * inv - bias[i]
    return out


@nb.njit(cache=True)
def _subtree_torque(parent, S, fext):
    """Generalized force ``S_i . sum(subtree fext)`` (``sum J^T F`` for body wrenches)."""
    n = S.shape[0]
    f = fext.copy()
    tau = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = 0.0
        for r in range(6):
            s += S[i, r] * f[i, r]
        tau[i] = s
        k = parent[i]
        if k >= 0:
            for r in range(6):
                f[k, r] += f[i, r]
    return tau


@nb.njit(cache=True)
def _ground_contact(R, p, S, parent, qd, bodies, points, anchors, active, k, c, mu, ground):
    """Spring-damper ground forces at body-fixed points.

    Normal force ``k d - c v_z`` clipped at zero (unilateral). Tangential force
    is a spring to the touchdown anchor plus damping, capped by the friction
    cone; the anchor slides along when the cap is hit. ``anchors`` and
    ``active`` are updated in place. Returns world forces (nc, 3) and the
    per-body spatial forces [moment; force] about the origin.
    """
    n = S.shape[0]
    nc = bodies.shape[0]
    v = np.zeros((n, 6))
    for i in range(n):
        kk = parent[i]
        for r in range(6):
            v[i, r] = S[i, r] * qd[i]
            if kk >= 0:
                v[i, r] += v[kk, r]
    F = np.zeros((nc, 3))
    fext = np.zeros((n, 6))
    x = np.empty(3)
    vx = np.empty(3)
    for ci in range(nc):
        b = bodies[ci]
        for r in range(3):
            x[r] = p[b, r] + R[b, r, 0] * points[ci, 0] + R[b, r, 1] * points[ci, 1] + R[b, r, 2] * points[ci, 2]
        w0, w1, w2 = v[b, 0], v[b, 1], v[b, 2]
        vx[0] = v[b, 3] + w1 * x[2] - w2 * x[1]
        vx[1] = v[b, 4] + w2 * x[0] - w0 * x[2]
        vx[2] = v[b, 5] + w0 * x[1] - w1 * x[0]
        d = ground - x[2]
        if d <= 0.0:
            active[ci] = False
            continue
        if not active[ci]:
            active[ci] = True
            anchors[ci, 0] = x[0]
            anchors[ci, 1] = x[1]
        fn = k * d - c * vx[2]
        if fn < 0.0:
            fn = 0.0
        ft0 = -k * (x[0] - anchors[ci, 0]) - c * vx[0]
        ft1 = -k * (x[1] - anchors[ci, 1]) - c * vx[1]
        ftn = np.sqrt(ft0 * ft0 + ft1 * ft1)
        lim = mu * fn
        if ftn > lim:
            s = lim / ftn
            ft0 *= s
            ft1 *= s
            # slide the anchor so the spring alone carries the capped force
            anchors[ci, 0] = x[0] + ft0 / k
            anchors[ci, 1] = x[1] + ft1 / k
        F[ci, 0] = ft0
        F[ci, 1] = ft1
        F[ci, 2] = fn
        fext[b, 0] += x[1] * fn - x[2] * ft1
        fext[b, 1] += x[2] * ft0 - x[0] * fn
        fext[b, 2] += x[0] * ft1 - x[1] * ft0
        fext[b, 3] += ft0
        fext[b, 4] += ft1
        fext[b, 5] += fn
    return F, fext


@nb.njit(cache=True)
def _sim_terms(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, nmass, ncom, ninertia, gravity,
               q, qd, tau_cmd, tau_act, tau_dist, fext_script, bodies, points, anchors, active, k, c, mu, ground):
    """Everything one simulation tick needs at state (q, qd).

    Returns qdd, external generalized force tau_e (contacts + scripted
    wrenches + joint disturbances), the nominal-model uncertainty torque
    ``Mn qdd + hn - tau_cmd - tau_e`` and the contact forces.
    """
    n = q.shape[0]
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    F, fc = _ground_contact(R, p, S, parent, qd, bodies, points, anchors, active, k, c, mu, ground)
    fext = fc + fext_script
    tau_e = _subtree_torque(parent, S, fext) + tau_dist
    Ib, h, m = _body_inertias(R, p, mass, com, inertia)
    bias = _rnea_kernel(parent, S, Ib, h, m, gravity, qd, np.zeros(n), np.zeros((n, 6)), True)
    M = _crba_kernel(parent, S, Ib, h, m)
    L = np.linalg.cholesky(M)
    qdd = _upper_solve_t(L, _lower_solve(L, tau_act + tau_e - bias))
    nIb, nh, nm = _body_inertias(R, p, nmass, ncom, ninertia)
    tau_u = _rnea_kernel(parent, S, nIb, nh, nm, gravity, qd, qdd, np.zeros((n, 6)), True) - tau_cmd - tau_e
    return qdd, tau_e, tau_u, F


@nb.njit(cache=True)
def _point_jacobian(parent, jtype, axis, rot_tree, pos_tree, q, body, local_point):
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    n = q.shape[0]
    J = np.zeros((6, n))
    if body < 0:
        return J, local_point.copy()
    x = p[body] + R[body] @ local_point
    j = body
    while j >= 0:
        w = S[j, :3]
        J[:3, j] = S[j, 3:] + np.cross(w, x)
        J[3:, j] = w
        j = parent[j]
    return J, x


@nb.njit(cache=True)
def _velocities(parent, S, qd, qdd):
    n = S.shape[0]
    v = np.zeros((n, 6))
    a = np.zeros((n, 6))
    for i in range(n):
        k = parent[i]
        for r in range(6):
            if k >= 0:
                v[i, r] = v[k, r] + S[i, r] * qd[i]
                a[i, r] = a[k, r] + S[i, r] * qdd[i]
            else:
                v[i, r] = S[i, r] * qd[i]
                a[i, r] = S[i, r] * qdd[i]
        w = v[i, :3]
        l = v[i, 3:]
        u = S[i] * qd[i]
        a[i, :3] += np.cross(w, u[:3])
        a[i, 3:] += np.cross(w, u[3:]) + np.cross(l, u[:3])
    return v, a


@nb.njit(cache=True)
def _point_motion(parent, jtype, axis, rot_tree, pos_tree, q, qd, qdd, body, local_point):
    """World position, velocity and classical acceleration of a body-fixed point,
    plus the body's rotation and angular velocity."""
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    v, a = _velocities(parent, S, qd, qdd)
    if body < 0:
        return local_point.copy(), np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3)
    x = p[body] + R[body] @ local_point
    w = v[body, :3].copy()
    vx = v[body, 3:] + np.cross(w, x)
    ax = a[body, 3:] + np.cross(a[body, :3], x) + np.cross(w, vx)
    return x, vx, ax, R[body].copy(), w


@nb.njit(cache=True)
def _kinetic_energy(parent, jtype, axis, rot_tree, pos_tree, mass, com, inertia, q, qd):
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    Ib, h, m = _body_inertias(R, p, mass, com, inertia)
    v, _ = _velocities(parent, S, qd, np.zeros(q.shape[0]))
    Iv = np.empty(6)
    T = 0.0
    for i in range(q.shape[0]):
        _imul(Ib, h, m, i, v[i], Iv)
        for r in range(6):
            T += 0.5 * v[i, r] * Iv[r]
    return T


@nb.njit(cache=True)
def _center_of_mass(parent, jtype, axis, rot_tree, pos_tree, mass, com, q, qd):
    """Whole-body center of mass and its velocity."""
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    v, _ = _velocities(parent, S, qd, np.zeros(q.shape[0]))
    c = np.zeros(3)
    cd = np.zeros(3)
    mt = 0.0
    for i in range(q.shape[0]):
        if mass[i] == 0.0:
            continue
        x = p[i] + R[i] @ com[i]
        w = v[i, :3]
        vx = v[i, 3:] + np.cross(w, x)
        c += mass[i] * x
        cd += mass[i] * vx
        mt += mass[i]
    return c / mt, cd / mt


@nb.njit(cache=True)
def _points_and_com(parent, jtype, axis, rot_tree, pos_tree, mass, com, q, qd, bodies, points):
    """World positions of body-fixed points plus center of mass and its velocity."""
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    X = np.empty((bodies.shape[0], 3))
    for k in range(bodies.shape[0]):
        b = bodies[k]
        X[k] = p[b] + R[b] @ points[k]
    c, cd = _center_of_mass(parent, jtype, axis, rot_tree, pos_tree, mass, com, q, qd)
    return X, c, cd


@nb.njit(cache=True)
def _potential_energy(parent, jtype, axis, rot_tree, pos_tree, mass, com, gravity, q):
    R, p, S = _kinematics(parent, jtype, axis, rot_tree, pos_tree, q)
    V = 0.0
    for i in range(q.shape[0]):
        c = p[i] + R[i] @ com[i]
        V -= mass[i] * (gravity @ c)
    return V


# ---------------------------------------------------------------------------
# public API


def _state(model: RobotModel, q, name="q") -> np.ndarray:
    arr = np.ascontiguousarray(q, dtype=float)
    if arr.shape != (model.n_v,):
        raise ValueError(f"{name} must have shape ({model.n_v},), got {arr.shape}")
    return arr


def _args(model: RobotModel):
    t = model.tree
    return t.parent, t.jtype, t.axis, t.rot_tree, t.pos_tree


def mass_and_bias(model: RobotModel, q, qd, wrenches=()):
    """``M(q)`` and ``C qd + g - sum J^T F`` in one pass."""
    q, qd = _state(model, q), _state(model, qd, "qd")
    fext = _body_forces(model, q, wrenches)
    return _mass_and_bias(*_args(model), *_inertial(model), model.tree.gravity, q, qd, fext)


def _inertial(model: RobotModel):
    t = model.tree
    return t.mass, t.com, t.inertia


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Joint-space inertia matrix by the composite-rigid-body algorithm."""
    q = _state(model, q)
    return _crba(*_args(model), *_inertial(model), q)


def _body_forces(model: RobotModel, q, wrenches) -> np.ndarray:
    fext = np.zeros((model.n_v, 6))
    if not wrenches:
        return fext
    R, p, _ = _kinematics(*_args(model), q)
    for w in wrenches:
        body = model.tree.body_of(w.link)
        if body < 0:
            continue
        x = p[body] + R[body] @ np.asarray(w.point, dtype=float)
        F = np.asarray(w.wrench, dtype=float)
        fext[body, :3] += F[3:] + np.cross(x, F[:3])
        fext[body, 3:] += F[:3]
    return fext


def inverse_dynamics(model: RobotModel, q, qd, qdd, wrenches=()) -> np.ndarray:
    """Generalized force ``M qdd + C qd + g - sum J^T F`` (recursive Newton-Euler)."""
    q, qd, qdd = _state(model, q), _state(model, qd, "qd"), _state(model, qdd, "qdd")
    fext = _body_forces(model, q, wrenches)
    t = model.tree
    return _rnea(*_args(model), *_inertial(model), t.gravity, q, qd, qdd, fext, True)


def bias_forces(model: RobotModel, q, qd) -> np.ndarray:
    """``C(q, qd) qd + g(q)``."""
    return inverse_dynamics(model, q, qd, np.zeros(model.n_v))


def gravity_forces(model: RobotModel, q) -> np.ndarray:
    z = np.zeros(model.n_v)
    return inverse_dynamics(model, q, z, z)


def coriolis_forces(model: RobotModel, q, qd) -> np.ndarray:
    """``C(q, qd) qd`` without gravity."""
    q, qd = _state(model, q), _state(model, qd, "qd")
    t = model.tree
    z = np.zeros(model.n_v)
    return _rnea(*_args(model), *_inertial(model), t.gravity, q, qd, z,
                 np.zeros((model.n_v, 6)), False)


def external_torque(model: RobotModel, q, wrenches) -> np.ndarray:
    """``sum J_c^T F`` for a set of point wrenches."""
    q = _state(model, q)
    tau = np.zeros(model.n_v)
    for w in wrenches:
        J = contact_jacobian(model, q, w.link, w.point)
        tau += J.T @ np.asarray(w.wrench, dtype=float)
    return tau


def forward_dynamics(model: RobotModel, q, qd, tau, wrenches=()) -> np.ndarray:
    """Solve ``M qdd + C qd + g = tau + sum J^T F`` for ``qdd``."""
    q, qd, tau = _state(model, q), _state(model, qd, "qd"), _state(model, tau, "tau")
    fext = _body_forces(model, q, wrenches)
    try:
        return _forward(*_args(model), *_inertial(model), model.tree.gravity, q, qd, tau, fext)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"mass matrix not positive definite at q={q}") from exc


def beta_term(model: RobotModel, q, qd, method: str = "momentum_rate", step: float = FD_STEP) -> np.ndarray:
    """Observer term ``C^T(q, qd) qd - g(q)``.

    ``momentum_rate`` uses ``C^T qd = Mdot qd - C qd`` with ``Mdot`` from a
    central difference of ``M`` along ``qd`` (two mass-matrix evaluations).
    ``energy_gradient`` uses ``C^T qd = d/dq (qd^T M(q) qd / 2)`` with central
    differences per coordinate. ``christoffel`` forms the Christoffel matrix
    explicitly (intended for small models, as a cross-check).
    """
    q, qd = _state(model, q), _state(model, qd, "qd")
    if method == "momentum_rate":
        return _beta_momentum(*_args(model), *_inertial(model), model.tree.gravity, q, qd, float(step))
    g = gravity_forces(model, q)
    if method == "energy_gradient":
        t = model.tree
        out = np.empty(model.n_v)
        for i in range(model.n_v):
            e = np.zeros(model.n_v)
            e[i] = step
            Tp = _kinetic_energy(*_args(model), *_inertial(model), q + e, qd)
            Tm = _kinetic_energy(*_args(model), *_inertial(model), q - e, qd)
            out[i] = (Tp - Tm) / (2 * step)
        return out - g
    if method == "christoffel":
        return christoffel_matrix(model, q, qd, step).T @ qd - g
    raise ValueError(f"unknown beta method {method!r}")


def mass_matrix_derivatives(model: RobotModel, q, step: float = FD_STEP) -> np.ndarray:
    """``dM/dq_k`` stacked on the first axis (central differences)."""
    q = _state(model, q)
    n = model.n_v
    dM = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        dM[k] = (mass_matrix(model, q + e) - mass_matrix(model, q - e)) / (2 * step)
    return dM


def christoffel_matrix(model: RobotModel, q, qd, step: float = FD_STEP) -> np.ndarray:
    """Coriolis matrix built from Christoffel symbols of the first kind.

    ``C_ij = sum_k 1/2 (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i) qd_k``, which
    satisfies ``Mdot = C + C^T``.
    """
    qd = _state(model, qd, "qd")
    dM = mass_matrix_derivatives(model, q, step)  # dM[k, i, j]
    t1 = np.einsum("kij,k->ij", dM, qd)
    t2 = np.einsum("jik,k->ij", dM, qd)
    t3 = np.einsum("ijk,k->ij", dM, qd)
    return 0.5 * (t1 + t2 - t3)


def contact_jacobian(model: RobotModel, q, link: str, point=(0.0, 0.0, 0.0)) -> np.ndarray:
    """6 x n_v Jacobian mapping ``qd`` to the ``[linear; angular]`` velocity of a link point."""
    q = _state(model, q)
    body = model.tree.body_of(link)
    J, _ = _point_jacobian(*_args(model), q, body, np.asarray(point, dtype=float))
    return J


def point_position(model: RobotModel, q, link: str, point=(0.0, 0.0, 0.0)) -> np.ndarray:
    q = _state(model, q)
    body = model.tree.body_of(link)
    _, x = _point_jacobian(*_args(model), q, body, np.asarray(point, dtype=float))
    return x


def link_pose(model: RobotModel, q, link: str):
    """World rotation and origin of a link frame."""
    q = _state(model, q)
    body = model.tree.body_of(link)
    if body < 0:
        return np.eye(3), np.zeros(3)
    R, p, _ = _kinematics(*_args(model), q)
    return R[body], p[body]


def point_motion(model: RobotModel, q, qd, qdd, link: str, point=(0.0, 0.0, 0.0)):
    """Position, velocity, classical acceleration of a point, and link rotation / angular velocity."""
    body = model.tree.body_of(link)
    return _point_motion(*_args(model), _state(model, q), _state(model, qd, "qd"),
                         _state(model, qdd, "qdd"), body, np.asarray(point, dtype=float))


def kinetic_energy(model: RobotModel, q, qd) -> float:
    return float(_kinetic_energy(*_args(model), *_inertial(model), _state(model, q), _state(model, qd, "qd")))


def center_of_mass(model: RobotModel, q, qd=None):
    """Center of mass of the moving bodies and its velocity (world frame)."""
    q = _state(model, q)
    qd = np.zeros(model.n_v) if qd is None else _state(model, qd, "qd")
    t = model.tree
    return _center_of_mass(*_args(model), t.mass, t.com, q, qd)


def potential_energy(model: RobotModel, q) -> float:
    t = model.tree
    return float(_potential_energy(*_args(model), t.mass, t.com, t.gravity, _state(model, q)))


def wrench_transform(from_point, to_point) -> np.ndarray:
    """Map a world-axes wrench ``[force; moment]`` about ``from_point`` to the
    equivalent wrench about ``to_point``."""
    d = np.asarray(from_point, dtype=float) - np.asarray(to_point, dtype=float)
    X = np.eye(6)
    X[3:, :3] = np.array([[0, -d[2], d[1]], [d[2], 0, -d[0]], [-d[1], d[0], 0]])
    return X
