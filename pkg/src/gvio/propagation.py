"""Discrete IMU mean propagation and error-state transition.

Mean propagation over one interval dt with bias-corrected inputs
w = omega_m - bg, a = accel_m - ba held constant (zero-order hold):

    R' = R gamma0(w dt)
    v' = v + g dt + R gamma1(w dt) a dt
    p' = p + v dt + g dt^2 / 2 + R gamma2(w dt) a dt^2
    clk_alpha' = clk_alpha + f dt        (per tracked constellation)

Everything else is constant across propagation; clones and landmarks are
anchored to non-evolving poses, so they receive neither motion nor process
noise (decoupled propagation).

The error-state transition is block diagonal,
diag(Phi_imu 15x15, I extrinsics, I clones, I landmarks, Phi_clock), with
Phi_imu exactly linear in the invariant error for the kinematic part:

    dth' = dth                       - dt R gamma1(w dt) dbg
    dp'  = dt^2/2 g^ dth + dp + dt dv - dt^3 R D2 dbg - dt^2 R gamma2 dba
    dv'  = dt g^ dth + dv            - dt^2 R D1 dbg  - dt  R gamma1 dba

where Dm = d/du [gamma_m(w dt + u) (a dt)] is evaluated by its power
series (adaptively truncated; inputs per step are small angles).  The
finite-difference invariant in the tests is the binding check on these
blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GRAVITY_W, ExtendedPose, gamma, skew
from .state import CONSTELLATIONS, NavState, symmetrize


@dataclass
class ProcessNoise:
    """Continuous-time noise densities (per sqrt(Hz) / sqrt(s))."""

    gyro_density: float = 2.0e-4       # rad/s/sqrt(Hz)
    accel_density: float = 2.0e-3      # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.0e-6          # rad/s^2/sqrt(Hz)
    accel_walk: float = 1.0e-5         # m/s^3/sqrt(Hz)
    clock_bias_walk: float = 0.1       # m/sqrt(s)
    clock_drift_walk: float = 0.01     # m/s/sqrt(s)


def unbiased_inputs(x, omega_m, accel_m):
    return (np.asarray(omega_m, float) - x.gyro_bias,
            np.asarray(accel_m, float) - x.accel_bias)


def propagate_mean(x, omega_m, accel_m, dt, gravity=GRAVITY_W):
    """Closed-form mean propagation over dt > 0."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    w, a = unbiased_inputs(x, omega_m, accel_m)
    theta = w * dt
    rot, pos, vel = x.imu.rot, x.imu.pos, x.imu.vel
    out = x.copy()
    out.imu.rot = rot @ gamma(0, theta)
    out.imu.vel = vel + gravity * dt + rot @ gamma(1, theta) @ (a * dt)
    out.imu.pos = (pos + vel * dt + 0.5 * gravity * dt * dt
                   + rot @ gamma(2, theta) @ (a * dt * dt))
    for const in out.clock_biases:
        out.clock_biases[const] = x.clock_biases[const] + x.clock_drift * dt
    return out


def gamma_dir_pair(theta, y, tol=1e-12, max_terms=30):
    """Matrices (M1, M2) with Mm u = d/de gamma_m(theta + e u) y at e = 0.

    Power-series evaluation,
    Mm = -sum_{n>=1} 1/(m+n)! sum_{j=0}^{n-1} A^j skew(A^{n-1-j} y),
    truncated adaptively (A = theta^); the inner sums are shared between
    the two orders (compiled kernel).
    """
    from ._kernels import gamma_dir_pair_nb
    return gamma_dir_pair_nb(np.ascontiguousarray(theta, dtype=float),
                             np.ascontiguousarray(y, dtype=float),
                             tol, max_terms)


def gamma_dir_derivative(m, theta, y, tol=1e-12, max_terms=30):
    """Single-order version of gamma_dir_pair (m in {1, 2})."""
    pair = gamma_dir_pair(theta, y, tol, max_terms)
    return pair[m - 1]


def imu_transition_block(x, omega_m, accel_m, dt, gravity=GRAVITY_W):
    """15x15 transition of the IMU error block (dth, dp, dv, dbg, dba).

    The gyro-bias columns carry two contributions: the direct sensitivity
    of the gamma integrals to the rotation increment, and the rotation of
    the *propagated* position/velocity estimate by the bias-induced
    attitude error (dth' = dth - dt R gamma1 dbg enters the translation
    errors through dth' x v', dth' x p').
    """
    w, a = unbiased_inputs(x, omega_m, accel_m)
    theta = w * dt
    g1 = gamma(1, theta)
    g2 = gamma(2, theta)
    return _imu_phi(x, a, theta, dt, g1, g2, gravity)


def _imu_phi(x, a, theta, dt, g1, g2, gravity):
    from ._kernels import imu_phi_kernel
    return imu_phi_kernel(np.ascontiguousarray(x.imu.rot), x.imu.pos,
                          x.imu.vel, theta, np.ascontiguousarray(a, dtype=float),
                          dt, np.ascontiguousarray(gravity, dtype=float))


def _imu_phi_reference(x, a, theta, dt, g1, g2, gravity):
    rot = x.imu.rot
    gx = skew(gravity)
    # propagated mean, needed by the bias couplings
    v_next = x.imu.vel + gravity * dt + rot @ g1 @ (a * dt)
    p_next = (x.imu.pos + x.imu.vel * dt + 0.5 * gravity * dt * dt
              + rot @ g2 @ (a * dt * dt))
    rg1 = rot @ g1
    d1, d2 = gamma_dir_pair(theta, a)
    phi = np.eye(15)
    # kinematic couplings (state independent)
    phi[3:6, 0:3] = 0.5 * dt * dt * gx
    phi[3:6, 6:9] = dt * np.eye(3)
    phi[6:9, 0:3] = dt * gx
    # gyro-bias couplings
    phi[0:3, 9:12] = -dt * rg1
    phi[3:6, 9:12] = -dt * skew(p_next) @ rg1 - dt ** 3 * rot @ d2
    phi[6:9, 9:12] = -dt * skew(v_next) @ rg1 - dt * dt * rot @ d1
    # accel-bias couplings
    phi[3:6, 12:15] = -dt * dt * rot @ g2
    phi[6:9, 12:15] = -dt * rg1
    return phi


def transition_matrix(x, omega_m, accel_m, dt, gravity=GRAVITY_W):
    """Full block-diagonal transition for the current layout."""
    lay = x.layout()
    phi = np.eye(lay.dim)
    phi[0:15, 0:15] = imu_transition_block(x, omega_m, accel_m, dt, gravity)
    if x.clock_biases:
        drift = lay.slice(("drift",)).start
        for const in x.clock_biases:
            row = lay.slice(("clk", const)).start
            phi[row, drift] = dt
    return phi


def _imu_noise_matrix(x, noise):
    """G Qc G^T restricted to the IMU block (15x15, continuous time).

    Gyro/accel white noise enters through -R, so the blocks collapse to
    sigma^2 I; bias walks are direct.
    """
    m = np.zeros((15, 15))
    m[0:3, 0:3] = noise.gyro_density ** 2 * np.eye(3)
    m[6:9, 6:9] = noise.accel_density ** 2 * np.eye(3)
    m[9:12, 9:12] = noise.gyro_walk ** 2 * np.eye(3)
    m[12:15, 12:15] = noise.accel_walk ** 2 * np.eye(3)
    return m


def process_noise(x, omega_m, accel_m, dt, noise, trapezoidal=False,
                  gravity=GRAVITY_W, phi_imu=None):
    """Discrete process noise Q_d = Phi G Qc G^T Phi^T dt (or trapezoidal).

    Only the IMU and clock diagonal blocks are nonzero; clones, landmarks
    and extrinsics receive no process noise.
    """
    lay = x.layout()
    qd = np.zeros((lay.dim, lay.dim))
    phi_i = (imu_transition_block(x, omega_m, accel_m, dt, gravity)
             if phi_imu is None else phi_imu)
    m = _imu_noise_matrix(x, noise)
    if trapezoidal:
        qd[0:15, 0:15] = 0.5 * dt * (phi_i @ m @ phi_i.T + m)
    else:
        qd[0:15, 0:15] = dt * (phi_i @ m @ phi_i.T)
    if x.clock_biases:
        consts = [c for c in CONSTELLATIONS if c in x.clock_biases]
        nc = len(consts)
        phi_c = np.eye(nc + 1)
        phi_c[:nc, nc] = dt
        qc = np.diag([noise.clock_bias_walk ** 2] * nc
                     + [noise.clock_drift_walk ** 2])
        if trapezoidal:
            qd_c = 0.5 * dt * (phi_c @ qc @ phi_c.T + qc)
        else:
            qd_c = dt * (phi_c @ qc @ phi_c.T)
        idx = [lay.slice(("clk", c)).start for c in consts]
        idx.append(lay.slice(("drift",)).start)
        qd[np.ix_(idx, idx)] = qd_c
    return qd


def _cov_sweep(p, x, lay, phi_i, dt):
    """Blockwise Phi P Phi^T for the block-diagonal transition."""
    out = p.copy()
    out[0:15, :] = phi_i @ p[0:15, :]
    drift = lay.slice(("drift",)).start if x.clock_biases else None
    if drift is not None:
        for const in x.clock_biases:
            row = lay.slice(("clk", const)).start
            out[row, :] = p[row, :] + dt * p[drift, :]
        # column sweep on the row-transformed matrix
        for const in x.clock_biases:
            col = lay.slice(("clk", const)).start
            out[:, col] += dt * out[:, drift]
    out[:, 0:15] = out[:, 0:15] @ phi_i.T
    return out


def propagate_covariance(p, x, omega_m, accel_m, dt, noise, trapezoidal=False,
                         gravity=GRAVITY_W):
    """P <- Phi P Phi^T + Q_d, computed blockwise.

    Identical to the dense product with transition_matrix(); the identity
    blocks on extrinsics/clones/landmarks are just never multiplied out.
    """
    lay = x.layout()
    phi_i = imu_transition_block(x, omega_m, accel_m, dt, gravity)
    out = _cov_sweep(p, x, lay, phi_i, dt)
    out += process_noise(x, omega_m, accel_m, dt, noise, trapezoidal, gravity,
                         phi_imu=phi_i)
    return symmetrize(out)


def imu_step(x, p, omega_m, accel_m, dt, noise, trapezoidal=False,
             gravity=GRAVITY_W):
    """Fused mean and covariance propagation over one interval.

    Exactly propagate_mean + propagate_covariance with the gamma factors
    evaluated once; this is the per-sample path of the estimation loop.
    The returned state shares the untouched substructure (clones,
    landmarks, biases) with the input, which the functional state ops
    never mutate in place.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    w, a = unbiased_inputs(x, omega_m, accel_m)
    theta = w * dt
    g0 = gamma(0, theta)
    g1 = gamma(1, theta)
    g2 = gamma(2, theta)
    lay = x.layout()
    phi_i = _imu_phi(x, a, theta, dt, g1, g2, gravity)
    p_new = _cov_sweep(p, x, lay, phi_i, dt)
    # process noise blocks added in place (only IMU and clock slots)
    m = _imu_noise_matrix(x, noise)
    if trapezoidal:
        p_new[0:15, 0:15] += 0.5 * dt * (phi_i @ m @ phi_i.T + m)
    else:
        p_new[0:15, 0:15] += dt * (phi_i @ m @ phi_i.T)
    if x.clock_biases:
        consts = [c for c in CONSTELLATIONS if c in x.clock_biases]
        nc = len(consts)
        phi_c = np.eye(nc + 1)
        phi_c[:nc, nc] = dt
        qc = np.diag([noise.clock_bias_walk ** 2] * nc
                     + [noise.clock_drift_walk ** 2])
        qd_c = (0.5 * dt * (phi_c @ qc @ phi_c.T + qc) if trapezoidal
                else dt * (phi_c @ qc @ phi_c.T))
        idx = [lay.slice(("clk", c)).start for c in consts]
        idx.append(lay.slice(("drift",)).start)
        p_new[np.ix_(idx, idx)] += qd_c
    from ._kernels import symmetrize_inplace
    p_new = symmetrize_inplace(p_new)

    rot, pos, vel = x.imu.rot, x.imu.pos, x.imu.vel
    out = NavState(
        imu=ExtendedPose(rot @ g0,
                         (pos + vel * dt + 0.5 * gravity * dt * dt
                          + rot @ g2 @ (a * dt * dt)),
                         vel + gravity * dt + rot @ g1 @ (a * dt)),
        gyro_bias=x.gyro_bias, accel_bias=x.accel_bias,
        extrinsics=x.extrinsics,
        clones=dict(x.clones), clone_times=dict(x.clone_times),
        landmarks=dict(x.landmarks),
        clock_biases={c: v + x.clock_drift * dt
                      for c, v in x.clock_biases.items()},
        clock_drift=x.clock_drift,
        estimate_extrinsics=x.estimate_extrinsics,
    )
    return out, p_new
