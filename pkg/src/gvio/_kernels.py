"""Compiled inner loops for the small fixed-size math.

Everything here is a plain-array kernel with a pure-Python fallback; the
public modules keep the readable numpy formulations for cold paths and
dispatch the per-feature / per-sample hot loops through these.  Results
are identical to the numpy formulations up to round-off ordering.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

_FACT = np.array([math.factorial(k) for k in range(24)], dtype=np.float64)


@njit(cache=True)
def tri_gauss_newton(rot_wc, centers, uv, q0, max_iter, depth_eps):
    """Inverse-depth Gauss-Newton over stacked observations.

    Returns (q, status): 0 converged, 1 non-positive depth, 2 singular
    normal matrix, 3 iteration budget exhausted.
    """
    n = rot_wc.shape[0]
    q = q0.copy()
    for _ in range(max_iter):
        inv_rho = 1.0 / q[2]
        ref = rot_wc[0]
        p_w = np.empty(3)
        for i in range(3):
            p_w[i] = (ref[i, 0] * q[0] + ref[i, 1] * q[1]
                      + ref[i, 2]) * inv_rho + centers[0, i]
        dq = np.empty((3, 3))
        for i in range(3):
            dq[i, 0] = ref[i, 0] * inv_rho
            dq[i, 1] = ref[i, 1] * inv_rho
            dq[i, 2] = -(ref[i, 0] * q[0] + ref[i, 1] * q[1]
                         + ref[i, 2]) * inv_rho * inv_rho
        jtj = np.zeros((3, 3))
        jtr = np.zeros(3)
        for k in range(n):
            r = rot_wc[k]
            d0 = p_w[0] - centers[k, 0]
            d1 = p_w[1] - centers[k, 1]
            d2 = p_w[2] - centers[k, 2]
            pc0 = r[0, 0] * d0 + r[1, 0] * d1 + r[2, 0] * d2
            pc1 = r[0, 1] * d0 + r[1, 1] * d1 + r[2, 1] * d2
            pc2 = r[0, 2] * d0 + r[1, 2] * d1 + r[2, 2] * d2
            if pc2 <= depth_eps:
                return q, 1
            iz = 1.0 / pc2
            jac = np.empty((2, 3))
            for cc in range(3):
                c0 = r[0, 0] * dq[0, cc] + r[1, 0] * dq[1, cc] + r[2, 0] * dq[2, cc]
                c1 = r[0, 1] * dq[0, cc] + r[1, 1] * dq[1, cc] + r[2, 1] * dq[2, cc]
                c2 = r[0, 2] * dq[0, cc] + r[1, 2] * dq[1, cc] + r[2, 2] * dq[2, cc]
                jac[0, cc] = iz * c0 - pc0 * iz * iz * c2
                jac[1, cc] = iz * c1 - pc1 * iz * iz * c2
            r0 = uv[k, 0] - pc0 * iz
            r1 = uv[k, 1] - pc1 * iz
            for a in range(3):
                for b in range(3):
                    jtj[a, b] += jac[0, a] * jac[0, b] + jac[1, a] * jac[1, b]
                jtr[a] += jac[0, a] * r0 + jac[1, a] * r1
        det = np.linalg.det(jtj)
        if abs(det) < 1e-18:
            return q, 2
        step = np.linalg.solve(jtj, jtr)
        q = q + step
        if q[2] <= 1e-9:
            return q, 1
        sn = math.sqrt(step[0] ** 2 + step[1] ** 2 + step[2] ** 2)
        qn = math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2)
        if sn < 1e-8 * max(1.0, qn):
            return q, 0
    return q, 3


@njit(cache=True)
def reprojection_mean(rot_wc, centers, uv, p_w, depth_eps):
    """Mean reprojection residual; returns (mean, ok)."""
    n = rot_wc.shape[0]
    total = 0.0
    for k in range(n):
        r = rot_wc[k]
        d0 = p_w[0] - centers[k, 0]
        d1 = p_w[1] - centers[k, 1]
        d2 = p_w[2] - centers[k, 2]
        pc0 = r[0, 0] * d0 + r[1, 0] * d1 + r[2, 0] * d2
        pc1 = r[0, 1] * d0 + r[1, 1] * d1 + r[2, 1] * d2
        pc2 = r[0, 2] * d0 + r[1, 2] * d1 + r[2, 2] * d2
        if pc2 <= depth_eps:
            return 0.0, False
        e0 = uv[k, 0] - pc0 / pc2
        e1 = uv[k, 1] - pc1 / pc2
        total += math.sqrt(e0 * e0 + e1 * e1)
    return total / n, True


@njit(cache=True)
def feature_row_math(rot, trans, cams, srot, strans, p_f, uv, depth_eps):
    """Per-observation camera-frame math for one feature.

    rot/trans are the observing *clone* poses; cams selects the left (0)
    or right (1) physical camera through the stereo transform.  Returns
    (front (n,2,3), rot_block (n,2,3), res (n,2), ok (n,)) where front is
    the projection chain and rot_block = front @ skew(p_f).
    """
    n = rot.shape[0]
    front = np.empty((n, 2, 3))
    rot_block = np.empty((n, 2, 3))
    res = np.empty((n, 2))
    ok = np.empty(n, dtype=np.bool_)
    for k in range(n):
        r = rot[k]
        d0 = p_f[0] - trans[k, 0]
        d1 = p_f[1] - trans[k, 1]
        d2 = p_f[2] - trans[k, 2]
        # p in the left camera, chain = R_clone^T
        p0 = r[0, 0] * d0 + r[1, 0] * d1 + r[2, 0] * d2
        p1 = r[0, 1] * d0 + r[1, 1] * d1 + r[2, 1] * d2
        p2 = r[0, 2] * d0 + r[1, 2] * d1 + r[2, 2] * d2
        if cams[k] == 1:
            q0 = srot[0, 0] * p0 + srot[0, 1] * p1 + srot[0, 2] * p2 + strans[0]
            q1 = srot[1, 0] * p0 + srot[1, 1] * p1 + srot[1, 2] * p2 + strans[1]
            q2 = srot[2, 0] * p0 + srot[2, 1] * p1 + srot[2, 2] * p2 + strans[2]
            p0, p1, p2 = q0, q1, q2
        if p2 <= depth_eps:
            ok[k] = False
            continue
        ok[k] = True
        iz = 1.0 / p2
        res[k, 0] = uv[k, 0] - p0 * iz
        res[k, 1] = uv[k, 1] - p1 * iz
        for c in range(3):
            # chain column c: (R_stereo?) @ R^T e_c
            ch0 = r[c, 0]
            ch1 = r[c, 1]
            ch2 = r[c, 2]
            if cams[k] == 1:
                t0 = srot[0, 0] * ch0 + srot[0, 1] * ch1 + srot[0, 2] * ch2
                t1 = srot[1, 0] * ch0 + srot[1, 1] * ch1 + srot[1, 2] * ch2
                t2 = srot[2, 0] * ch0 + srot[2, 1] * ch1 + srot[2, 2] * ch2
                ch0, ch1, ch2 = t0, t1, t2
            front[k, 0, c] = iz * ch0 - p0 * iz * iz * ch2
            front[k, 1, c] = iz * ch1 - p1 * iz * iz * ch2
        for c in range(3):
            a0 = front[k, 0, 0]
            a1 = front[k, 0, 1]
            a2 = front[k, 0, 2]
            b0 = front[k, 1, 0]
            b1 = front[k, 1, 1]
            b2 = front[k, 1, 2]
            # columns of skew(p_f)
            if c == 0:
                s0, s1, s2 = 0.0, p_f[2], -p_f[1]
            elif c == 1:
                s0, s1, s2 = -p_f[2], 0.0, p_f[0]
            else:
                s0, s1, s2 = p_f[1], -p_f[0], 0.0
            rot_block[k, 0, c] = a0 * s0 + a1 * s1 + a2 * s2
            rot_block[k, 1, c] = b0 * s0 + b1 * s1 + b2 * s2
    return front, rot_block, res, ok


@njit(cache=True)
def gamma_pair01(theta):
    """(gamma0, gamma1) via the stable scalar series / closed forms."""
    t0, t1, t2 = theta[0], theta[1], theta[2]
    p2 = t0 * t0 + t1 * t1 + t2 * t2
    a = np.zeros((3, 3))
    a[0, 1] = -t2
    a[0, 2] = t1
    a[1, 0] = t2
    a[1, 2] = -t0
    a[2, 0] = -t1
    a[2, 1] = t0
    a2 = a @ a
    g0 = np.empty((3, 3))
    g1 = np.empty((3, 3))
    if p2 < 0.01:
        b0 = c0 = b1 = c1 = 0.0
        pk = 1.0
        for k in range(8):
            sign = -1.0 if k % 2 else 1.0
            b0 += sign * pk / _FACT[2 * k + 1]
            c0 += sign * pk / _FACT[2 * k + 2]
            b1 += sign * pk / _FACT[2 * k + 2]
            c1 += sign * pk / _FACT[2 * k + 3]
            pk *= p2
    else:
        phi = math.sqrt(p2)
        s, c = math.sin(phi), math.cos(phi)
        b0 = s / phi
        c0 = (1.0 - c) / p2
        b1 = c0
        c1 = (phi - s) / (p2 * phi)
    for i in range(3):
        for j in range(3):
            g0[i, j] = b0 * a[i, j] + c0 * a2[i, j]
            g1[i, j] = b1 * a[i, j] + c1 * a2[i, j]
        g0[i, i] += 1.0
        g1[i, i] += 1.0
    return g0, g1


@njit(cache=True)
def gamma_dir_pair_nb(theta, y, tol, max_terms):
    """Directional-derivative series shared between orders 1 and 2."""
    a = np.zeros((3, 3))
    a[0, 1] = -theta[2]
    a[0, 2] = theta[1]
    a[1, 0] = theta[2]
    a[1, 2] = -theta[0]
    a[2, 0] = -theta[1]
    a[2, 1] = theta[0]
    out1 = np.zeros((3, 3))
    out2 = np.zeros((3, 3))
    scale = max(1.0, abs(y[0]), abs(y[1]), abs(y[2]))
    pow_a = np.empty((max_terms + 1, 3, 3))
    pow_a[0] = np.eye(3)
    sk = np.empty((max_terms + 1, 3, 3))
    sk[0, 0, 0] = 0.0
    sk[0, 0, 1] = -y[2]
    sk[0, 0, 2] = y[1]
    sk[0, 1, 0] = y[2]
    sk[0, 1, 1] = 0.0
    sk[0, 1, 2] = -y[0]
    sk[0, 2, 0] = -y[1]
    sk[0, 2, 1] = y[0]
    sk[0, 2, 2] = 0.0
    vec = y.copy()
    for n in range(1, max_terms + 1):
        pow_a[n] = pow_a[n - 1] @ a
        v0 = a[0, 0] * vec[0] + a[0, 1] * vec[1] + a[0, 2] * vec[2]
        v1 = a[1, 0] * vec[0] + a[1, 1] * vec[1] + a[1, 2] * vec[2]
        v2 = a[2, 0] * vec[0] + a[2, 1] * vec[1] + a[2, 2] * vec[2]
        vec[0], vec[1], vec[2] = v0, v1, v2
        sk[n, 0, 0] = 0.0
        sk[n, 0, 1] = -v2
        sk[n, 0, 2] = v1
        sk[n, 1, 0] = v2
        sk[n, 1, 1] = 0.0
        sk[n, 1, 2] = -v0
        sk[n, 2, 0] = -v1
        sk[n, 2, 1] = v0
        sk[n, 2, 2] = 0.0
        term = np.zeros((3, 3))
        for j in range(n):
            term += pow_a[j] @ sk[n - 1 - j]
        out1 -= term / _FACT[1 + n]
        out2 -= term / _FACT[2 + n]
        biggest = 0.0
        for i in range(3):
            for j in range(3):
                if abs(term[i, j]) > biggest:
                    biggest = abs(term[i, j])
        if n >= 3 and biggest / _FACT[n + 1] < tol * scale:
            break
    return out1, out2


@njit(cache=True)
def null_project(h_f, h_x, r):
    """Left-nullspace projection of the 3-column block via Householder.

    Applies the three QR reflectors of h_f to [h_x | r] and returns the
    rows beyond the third, i.e. N^T h_x and N^T r for an orthonormal basis
    N of the left null space of h_f.  Equivalent to forming the complete-QR
    Q and multiplying, without the m x m matrix.
    """
    m = h_f.shape[0]
    d = h_x.shape[1]
    a = h_f.copy()
    hx = h_x.copy()
    rr = r.copy()
    v = np.empty(m)
    for col in range(3):
        norm2 = 0.0
        for i in range(col, m):
            norm2 += a[i, col] * a[i, col]
        norm = math.sqrt(norm2)
        if norm < 1e-300:
            continue
        alpha = -norm if a[col, col] >= 0.0 else norm
        v[col] = a[col, col] - alpha
        vnorm2 = v[col] * v[col]
        for i in range(col + 1, m):
            v[i] = a[i, col]
            vnorm2 += v[i] * v[i]
        if vnorm2 < 1e-300:
            continue
        beta = 2.0 / vnorm2
        for j in range(col, 3):
            dot = 0.0
            for i in range(col, m):
                dot += v[i] * a[i, j]
            dot *= beta
            for i in range(col, m):
                a[i, j] -= dot * v[i]
        for j in range(d):
            dot = 0.0
            for i in range(col, m):
                dot += v[i] * hx[i, j]
            dot *= beta
            for i in range(col, m):
                hx[i, j] -= dot * v[i]
        dot = 0.0
        for i in range(col, m):
            dot += v[i] * rr[i]
        dot *= beta
        for i in range(col, m):
            rr[i] -= dot * v[i]
    return hx[3:], rr[3:]


@njit(cache=True)
def retract_blocks(rots, trans, dth, dp):
    """Batched rotation-coupled retraction for clone poses.

    new_rot = gamma0(dth) rot,  new_trans = gamma0 trans + gamma1 dp.
    """
    n = rots.shape[0]
    new_rots = np.empty((n, 3, 3))
    new_trans = np.empty((n, 3))
    for k in range(n):
        g0, g1 = gamma_pair01(dth[k])
        new_rots[k] = g0 @ rots[k]
        new_trans[k] = g0 @ trans[k] + g1 @ dp[k]
    return new_rots, new_trans


@njit(cache=True)
def retract_points(points, dths, dps):
    """Batched anchored-point retraction: gamma0(dth) p + gamma1(dth) dp."""
    n = points.shape[0]
    out = np.empty((n, 3))
    for k in range(n):
        g0, g1 = gamma_pair01(dths[k])
        out[k] = g0 @ points[k] + g1 @ dps[k]
    return out


@njit(cache=True)
def symmetrize_inplace(p):
    n = p.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (p[i, j] + p[j, i])
            p[i, j] = v
            p[j, i] = v
    return p


@njit(cache=True)
def gamma_mat(m, theta):
    """gamma_m(theta) for one order, scalar-series / closed form."""
    t0, t1, t2 = theta[0], theta[1], theta[2]
    p2 = t0 * t0 + t1 * t1 + t2 * t2
    a = np.zeros((3, 3))
    a[0, 1] = -t2
    a[0, 2] = t1
    a[1, 0] = t2
    a[1, 2] = -t0
    a[2, 0] = -t1
    a[2, 1] = t0
    a2 = a @ a
    if p2 < 0.01:
        b = c = 0.0
        pk = 1.0
        for k in range(8):
            sign = -1.0 if k % 2 else 1.0
            b += sign * pk / _FACT[m + 2 * k + 1]
            c += sign * pk / _FACT[m + 2 * k + 2]
            pk *= p2
    else:
        phi = math.sqrt(p2)
        s, cc = math.sin(phi), math.cos(phi)
        if m == 0:
            b = s / phi
            c = (1.0 - cc) / p2
        elif m == 1:
            b = (1.0 - cc) / p2
            c = (phi - s) / (p2 * phi)
        elif m == 2:
            b = (phi - s) / (p2 * phi)
            c = (cc - 1.0 + p2 / 2.0) / (p2 * p2)
        else:
            b = (cc - 1.0 + p2 / 2.0) / (p2 * p2)
            c = (s - phi + p2 * phi / 6.0) / (p2 * p2 * phi)
    out = b * a + c * a2
    f = 1.0 / _FACT[m]
    out[0, 0] += f
    out[1, 1] += f
    out[2, 2] += f
    return out


@njit(cache=True)
def imu_phi_kernel(rot, pos, vel, theta, a, dt, gravity):
    """15x15 IMU error transition (same formulas as the numpy builder)."""
    g1 = gamma_mat(1, theta)
    g2 = gamma_mat(2, theta)
    d1, d2 = gamma_dir_pair_nb(theta, a, 1e-12, 30)
    rg1 = rot @ g1
    adt = a * dt
    v_next = vel + gravity * dt + rot @ (g1 @ adt)
    p_next = pos + vel * dt + 0.5 * gravity * dt * dt + rot @ (g2 @ (adt * dt))
    phi = np.eye(15)
    gx = np.zeros((3, 3))
    gx[0, 1] = -gravity[2]
    gx[0, 2] = gravity[1]
    gx[1, 0] = gravity[2]
    gx[1, 2] = -gravity[0]
    gx[2, 0] = -gravity[1]
    gx[2, 1] = gravity[0]
    sp = np.zeros((3, 3))
    sp[0, 1] = -p_next[2]
    sp[0, 2] = p_next[1]
    sp[1, 0] = p_next[2]
    sp[1, 2] = -p_next[0]
    sp[2, 0] = -p_next[1]
    sp[2, 1] = p_next[0]
    sv = np.zeros((3, 3))
    sv[0, 1] = -v_next[2]
    sv[0, 2] = v_next[1]
    sv[1, 0] = v_next[2]
    sv[1, 2] = -v_next[0]
    sv[2, 0] = -v_next[1]
    sv[2, 1] = v_next[0]
    phi[3:6, 0:3] = 0.5 * dt * dt * gx
    phi[6:9, 0:3] = dt * gx
    for i in range(3):
        phi[3 + i, 6 + i] = dt
    phi[0:3, 9:12] = -dt * rg1
    phi[3:6, 9:12] = -dt * (sp @ rg1) - dt ** 3 * (rot @ d2)
    phi[6:9, 9:12] = -dt * (sv @ rg1) - dt * dt * (rot @ d1)
    phi[3:6, 12:15] = -dt * dt * (rot @ g2)
    phi[6:9, 12:15] = -dt * rg1
    return phi


def warmup():
    """Trigger compilation of every kernel (used before timing runs)."""
    rot = np.stack([np.eye(3)] * 2)
    centers = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    uv = np.zeros((2, 2))
    tri_gauss_newton(rot, centers, uv, np.array([0.0, 0.0, 0.2]), 3, 1e-6)
    reprojection_mean(rot, centers, uv, np.array([0.0, 0.0, 5.0]), 1e-6)
    feature_row_math(rot, centers, np.zeros(2, dtype=np.int8), np.eye(3),
                     np.zeros(3), np.array([0.0, 0.0, 5.0]), uv, 1e-6)
    gamma_pair01(np.array([1e-3, 0.0, 0.0]))
    retract_blocks(rot, centers, np.zeros((2, 3)), np.zeros((2, 3)))
    retract_points(centers, np.zeros((2, 3)), np.zeros((2, 3)))
    null_project(np.ascontiguousarray(np.random.default_rng(0).standard_normal((6, 3))),
                 np.ascontiguousarray(np.random.default_rng(1).standard_normal((6, 4))),
                 np.zeros(6))
    symmetrize_inplace(np.zeros((4, 4)))
    gamma_mat(2, np.array([1e-3, 0.0, 0.0]))
    imu_phi_kernel(np.eye(3), np.zeros(3), np.zeros(3),
                   np.array([1e-3, 0.0, 0.0]), np.array([0.0, 0.0, 9.81]),
                   0.005, np.array([0.0, 0.0, -9.81]))
    gamma_dir_pair_nb(np.array([1e-3, 0.0, 0.0]),
                      np.array([1.0, 2.0, 3.0]), 1e-12, 30)
