"""Rotation-group power series, rigid-body transforms, and Earth frames.

The workhorse is ``gamma(m, theta)``, the 3x3 matrix series

    gamma_m(theta) = sum_{n>=0} (theta^)^n / (m+n)!

where ``theta^`` is the skew-symmetric matrix of ``theta``.  Order 0 is the
rotation exponential, order 1 the left Jacobian of SO(3); orders 2 and 3
appear in closed-form IMU integration and in process-noise discretization.
Closed forms are used away from zero and a truncated Taylor series below a
switch threshold, so the evaluation is continuous and accurate everywhere.

Also here: SO(3) logarithm, quaternion I/O for the dataset boundary, and
WGS-84 geodetic <-> ECEF <-> ENU conversions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS-84 ellipsoid constants (published standard values).
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_B = WGS84_A * (1.0 - WGS84_F)

# Gravity in the world (ENU-convention) frame, m/s^2.
GRAVITY_W = np.array([0.0, 0.0, -9.81])

# Below this angle the closed forms lose digits to cancellation (worst for
# order 3, error ~ eps/|theta|^3); the alternating scalar series for the
# I / theta^ / (theta^)^2 coefficients is exact to round-off there.
_SERIES_SWITCH = 0.1

_FACT = [math.factorial(k) for k in range(24)]


def skew(v):
    """Skew-symmetric matrix of a 3-vector: skew(v) @ w == cross(v, w)."""
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


def gamma(m, theta):
    """Evaluate gamma_m(theta) = sum_n (theta^)^n / (m+n)! for m in 0..3.

    Closed form above ``_SERIES_SWITCH``, truncated Taylor series below;
    both agree to ~1e-12 at the switch.
    """
    if m not in (0, 1, 2, 3):
        raise ValueError(f"gamma order must be in 0..3, got {m}")
    theta = np.asarray(theta, dtype=float)
    a = skew(theta)
    p2 = float(theta @ theta)
    a2 = a @ a
    if p2 < _SERIES_SWITCH * _SERIES_SWITCH:
        # gamma_m = I/m! + b a + c a2 with alternating, well-conditioned
        # scalar series b = sum_k (-1)^k phi^2k / (m+2k+1)!, c likewise
        # shifted by one; 8 terms converge far below round-off at 0.1 rad.
        b = c = 0.0
        pk = 1.0
        for k in range(8):
            sign = -1.0 if k % 2 else 1.0
            b += sign * pk / _FACT[m + 2 * k + 1]
            c += sign * pk / _FACT[m + 2 * k + 2]
            pk *= p2
        out = b * a
        out += c * a2
        out[0, 0] += 1.0 / _FACT[m]
        out[1, 1] += 1.0 / _FACT[m]
        out[2, 2] += 1.0 / _FACT[m]
        return out
    phi = math.sqrt(p2)
    s, c = math.sin(phi), math.cos(phi)
    p2, p3 = phi * phi, phi ** 3
    p4, p5 = phi ** 4, phi ** 5
    if m == 0:
        return np.eye(3) + (s / phi) * a + ((1.0 - c) / p2) * a2
    if m == 1:
        return np.eye(3) + ((1.0 - c) / p2) * a + ((phi - s) / p3) * a2
    if m == 2:
        return (0.5 * np.eye(3) + ((phi - s) / p3) * a
                + ((c - 1.0 + p2 / 2.0) / p4) * a2)
    return (np.eye(3) / 6.0 + ((c - 1.0 + p2 / 2.0) / p4) * a
            + ((s - phi + p3 / 6.0) / p5) * a2)


def gamma01(theta):
    """(gamma0, gamma1) sharing the skew powers; the boxplus hot path."""
    from ._kernels import gamma_pair01
    return gamma_pair01(np.ascontiguousarray(theta, dtype=float))


def _gamma01_reference(theta):
    """Numpy reference for the compiled pair (kept for tests)."""
    theta = np.asarray(theta, dtype=float)
    a = skew(theta)
    p2 = float(theta @ theta)
    a2 = a @ a
    if p2 < _SERIES_SWITCH * _SERIES_SWITCH:
        b0 = c0 = b1 = c1 = 0.0
        pk = 1.0
        for k in range(8):
            sign = -1.0 if k % 2 else 1.0
            b0 += sign * pk / _FACT[2 * k + 1]
            c0 += sign * pk / _FACT[2 * k + 2]
            b1 += sign * pk / _FACT[2 * k + 2]
            c1 += sign * pk / _FACT[2 * k + 3]
            pk *= p2
        g0 = b0 * a
        g0 += c0 * a2
        g0[0, 0] += 1.0
        g0[1, 1] += 1.0
        g0[2, 2] += 1.0
        g1 = b1 * a
        g1 += c1 * a2
        g1[0, 0] += 1.0
        g1[1, 1] += 1.0
        g1[2, 2] += 1.0
        return g0, g1
    phi = math.sqrt(p2)
    s, c = math.sin(phi), math.cos(phi)
    g0 = np.eye(3) + (s / phi) * a + ((1.0 - c) / p2) * a2
    g1 = np.eye(3) + ((1.0 - c) / p2) * a + ((phi - s) / (p2 * phi)) * a2
    return g0, g1


def so3_log(rot):
    """Rotation vector theta with gamma(0, theta) == rot and |theta| <= pi.

    The angle-pi neighbourhood extracts the axis from the symmetric part of
    the matrix (largest diagonal entry), which stays well conditioned where
    the sin-based formula does not.
    """
    rot = np.asarray(rot, dtype=float)
    cos_phi = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    # w = sin(phi) * axis, from the antisymmetric part
    w = 0.5 * np.array([rot[2, 1] - rot[1, 2],
                        rot[0, 2] - rot[2, 0],
                        rot[1, 0] - rot[0, 1]])
    phi = math.acos(cos_phi)
    if phi < 1e-8:
        return w
    if phi < math.pi - 1e-4:
        return (phi / math.sin(phi)) * w
    # Near pi: axis^2 from the symmetric part, angle from asin for conditioning.
    sym = 0.5 * (rot + rot.T)
    outer = (sym - cos_phi * np.eye(3)) / (1.0 - cos_phi)  # = axis axis^T
    i = int(np.argmax(np.diag(outer)))
    axis = outer[:, i] / math.sqrt(max(outer[i, i], 1e-300))
    axis = axis / np.linalg.norm(axis)
    s = np.linalg.norm(w)
    phi = math.pi - math.asin(min(1.0, s))
    if s > 1e-12:
        if float(axis @ w) < 0.0:
            axis = -axis
    else:
        # angle == pi exactly: sign convention, largest component positive
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0.0:
            axis = -axis
    return phi * axis


def is_rotation(rot, tol=1e-9):
    """True when rot is orthonormal with determinant +1 within tol."""
    rot = np.asarray(rot, dtype=float)
    return (np.abs(rot.T @ rot - np.eye(3)).max() <= tol
            and abs(np.linalg.det(rot) - 1.0) <= tol)


def quat_to_rot(q):
    """Unit quaternion (w, x, y, z) to a rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(rot):
    """Rotation matrix to a unit quaternion (w, x, y, z), w >= 0."""
    rot = np.asarray(rot, dtype=float)
    t = np.trace(rot)
    if t > 0.0:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([0.5 * r,
                      (rot[2, 1] - rot[1, 2]) * s,
                      (rot[0, 2] - rot[2, 0]) * s,
                      (rot[1, 0] - rot[0, 1]) * s])
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + rot[i, i] - rot[j, j] - rot[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (rot[j, i] + rot[i, j]) * s
        q[1 + k] = (rot[k, i] + rot[i, k]) * s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class GeodeticPoint:
    """Latitude (rad), longitude (rad), height above the ellipsoid (m)."""

    lat: float
    lon: float
    height: float

    def __post_init__(self):
        if abs(self.lat) > math.pi / 2 + 1e-12:
            raise ValueError(f"latitude out of range: {self.lat}")
        if abs(self.lon) > math.pi + 1e-12:
            raise ValueError(f"longitude out of range: {self.lon}")


def geodetic_to_ecef(pt):
    """WGS-84 geodetic point to ECEF coordinates (m)."""
    sin_lat, cos_lat = math.sin(pt.lat), math.cos(pt.lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    return np.array([
        (n + pt.height) * cos_lat * math.cos(pt.lon),
        (n + pt.height) * cos_lat * math.sin(pt.lon),
        (n * (1.0 - WGS84_E2) + pt.height) * sin_lat,
    ])


def ecef_to_geodetic(xyz, max_iter=10, tol=1e-15):
    """ECEF coordinates to a WGS-84 geodetic point.

    Bounded fixed-point iteration on the latitude (contraction factor about
    e^2/2, so round-off level is reached in a handful of steps); points
    within 1 km of the Earth center are rejected (iteration undefined).
    """
    xyz = np.asarray(xyz, dtype=float)
    if np.linalg.norm(xyz) < 1000.0:
        raise ValueError("point within 1 km of Earth center")
    x, y, z = xyz
    lon = math.atan2(y, x)
    rho = math.hypot(x, y)
    if rho < 1e-9:
        lat = math.copysign(math.pi / 2, z)
        return GeodeticPoint(lat, lon, abs(z) - WGS84_B)
    lat = math.atan2(z, rho * (1.0 - WGS84_E2))
    for _ in range(max_iter):
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        if abs(lat) < math.radians(89.9):
            height = rho / math.cos(lat) - n
        else:
            height = z / sin_lat - n * (1.0 - WGS84_E2)
        new_lat = math.atan2(z, rho * (1.0 - WGS84_E2 * n / (n + height)))
        done = abs(new_lat - lat) < tol
        lat = new_lat
        if done:
            break
    sin_lat = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    if abs(lat) < math.radians(89.9):
        height = rho / math.cos(lat) - n
    else:
        height = z / sin_lat - n * (1.0 - WGS84_E2)
    # Newton polish: the fixed point settles within a couple of ULPs of the
    # angles, which is still nanometers of position; project the 3D
    # back-substitution residual onto the local ENU axes and correct all
    # three coordinates, then pick the best representable neighbour.
    for _ in range(3):
        err = xyz - geodetic_to_ecef(GeodeticPoint(lat, lon, height))
        sl, cl = math.sin(lat), math.cos(lat)
        so_, co_ = math.sin(lon), math.cos(lon)
        east = np.array([-so_, co_, 0.0])
        north = np.array([-sl * co_, -sl * so_, cl])
        up = np.array([cl * co_, cl * so_, sl])
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sl * sl)
        lat = min(math.pi / 2, max(-math.pi / 2,
                                   lat + float(north @ err) / (n + height)))
        if rho > 1e-3:
            lon += float(east @ err) / ((n + height) * max(cl, 1e-12))
        height += float(up @ err)
    best = (lat, lon, height)
    best_err = np.linalg.norm(xyz - geodetic_to_ecef(GeodeticPoint(*best)))
    for dlat in (0, 1, -1):
        for dlon in (0, 1, -1):
            cand = (np.nextafter(lat, lat + dlat) if dlat else lat,
                    np.nextafter(lon, lon + dlon) if dlon else lon,
                    height)
            e = np.linalg.norm(xyz - geodetic_to_ecef(GeodeticPoint(*cand)))
            if e < best_err:
                best, best_err = cand, e
    return GeodeticPoint(*best)


def enu_rotation(origin):
    """Rotation whose columns are the local East, North, Up axes in ECEF.

    It maps ENU coordinates at ``origin`` into ECEF directions.
    """
    sl, cl = math.sin(origin.lat), math.cos(origin.lat)
    so, co = math.sin(origin.lon), math.cos(origin.lon)
    east = np.array([-so, co, 0.0])
    north = np.array([-sl * co, -sl * so, cl])
    up = np.array([cl * co, cl * so, sl])
    return np.column_stack([east, north, up])


@dataclass
class Pose:
    """Rigid transform: rotation matrix plus translation, x -> rot @ x + trans."""

    rot: np.ndarray
    trans: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other):
        return Pose(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    def inverse(self):
        return Pose(self.rot.T, -(self.rot.T @ self.trans))

    def apply(self, v):
        return self.rot @ np.asarray(v, dtype=float) + self.trans

    def copy(self):
        return Pose(self.rot.copy(), self.trans.copy())


@dataclass
class ExtendedPose:
    """Rotation, position and velocity: the IMU navigation block."""

    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.zeros(3))

    def as_pose(self):
        return Pose(self.rot.copy(), self.pos.copy())

    def copy(self):
        return ExtendedPose(self.rot.copy(), self.pos.copy(), self.vel.copy())
