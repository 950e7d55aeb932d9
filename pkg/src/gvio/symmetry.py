"""Symmetry and observability analysis for the fused system.

With raw GNSS involved, the familiar four unobservable directions of
visual-inertial odometry (rotation about gravity plus global translation)
survive only conditionally.  Stacking the differenced satellite direction
rows

    row_j = (n_j - n_{j-1})^T R_we,   j = 2..N

gives a matrix whose null space is exactly the set of world translations
the between-satellite differences cannot see.  If additionally both
g x p and g x v lie in that null space (vacuously when the receiver sits
still at the g-axis), the rotation about gravity stays unobservable too.

Under the invariant error parameterization those directions have a fixed
coordinate expression no matter where they are evaluated: translations
occupy every position-type slot, the g-rotation puts the gravity axis
into every rotation slot of world-frame quantities (IMU and clones; the
body-frame extrinsics are untouched) and exact zeros elsewhere.  Both the
analytic patterns and their numeric group-derivative construction are
provided, plus the stacked observability matrix used to verify them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import GRAVITY_W, gamma
from .state import boxminus


@dataclass
class DegeneracyReport:
    null_dim: int
    null_basis: np.ndarray        # 3 x null_dim, orthonormal columns
    yaw_unobservable: bool
    conditions_checked: dict      # residuals of g x p, g x v in the null space


def direction_diff_matrix(sat_units, r_w_ecef):
    """Stack (n_j - n_{j-1})^T R_we rows; (N-1) x 3, empty for N <= 1.

    Inputs must be unit vectors; near-unit inputs (within 1e-6) are
    normalized with a warning, anything worse is rejected.
    """
    cleaned = []
    for n in sat_units:
        n = np.asarray(n, dtype=float)
        err = abs(np.linalg.norm(n) - 1.0)
        if err > 1e-6:
            raise ValueError(f"direction vector norm off by {err:.2e}")
        if err > 1e-12:
            warnings.warn("normalizing near-unit satellite direction")
            n = n / np.linalg.norm(n)
        cleaned.append(n)
    if len(cleaned) <= 1:
        return np.zeros((0, 3))
    rows = [(cleaned[j] - cleaned[j - 1]) @ r_w_ecef
            for j in range(1, len(cleaned))]
    return np.array(rows)


def nullspace(mat, tol=1e-8):
    """Orthonormal right null-space basis via SVD, threshold tol * sigma_max."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    n = mat.shape[1]
    if mat.shape[0] == 0:
        return np.eye(n)
    u, s, vt = np.linalg.svd(mat)
    smax = s[0] if len(s) else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0.0 else 0
    return vt[rank:].T


def classify_degeneracy(sat_units, r_w_ecef, p_w, v_w, g_w=GRAVITY_W,
                        tol=1e-8):
    """Null-space dimension plus the yaw condition of the motion pattern.

    Yaw is flagged unobservable iff both g x p and g x v lie in the null
    space of the direction-difference matrix (relative residual below tol;
    vacuously true for zero vectors).
    """
    ng = direction_diff_matrix(sat_units, r_w_ecef)
    basis = nullspace(ng, tol)
    eps = 1e-12
    gp = np.cross(g_w, np.asarray(p_w, dtype=float))
    gv = np.cross(g_w, np.asarray(v_w, dtype=float))
    if ng.shape[0] == 0:
        res_p = res_v = 0.0
    else:
        res_p = float(np.linalg.norm(ng @ gp) / (np.linalg.norm(gp) + eps))
        res_v = float(np.linalg.norm(ng @ gv) / (np.linalg.norm(gv) + eps))
    return DegeneracyReport(
        null_dim=basis.shape[1],
        null_basis=basis,
        yaw_unobservable=(res_p < tol and res_v < tol),
        conditions_checked={"g_cross_p": res_p, "g_cross_v": res_v},
    )


def apply_translation(x, t):
    """Group action: shift every world position by t (velocity untouched)."""
    out = x.copy()
    t = np.asarray(t, dtype=float)
    out.imu.pos = x.imu.pos + t
    for fid, pose in x.clones.items():
        out.clones[fid].trans = pose.trans + t
    for fid, lm in x.landmarks.items():
        out.landmarks[fid].position = lm.position + t
    return out


def apply_g_rotation(x, angle, g_w=GRAVITY_W):
    """Group action: rotate the whole world-frame state about gravity."""
    axis = np.asarray(g_w, dtype=float)
    axis = axis / np.linalg.norm(axis)
    rot = gamma(0, angle * axis)
    out = x.copy()
    out.imu.rot = rot @ x.imu.rot
    out.imu.pos = rot @ x.imu.pos
    out.imu.vel = rot @ x.imu.vel
    for fid, pose in x.clones.items():
        out.clones[fid].rot = rot @ pose.rot
        out.clones[fid].trans = rot @ pose.trans
    for fid, lm in x.landmarks.items():
        out.landmarks[fid].position = rot @ lm.position
    return out


def unobservable_directions(x, report, g_w=GRAVITY_W):
    """Columns of the candidate unobservable directions for the layout of x.

    One column per null-basis translation (the vector in every
    position-type slot: IMU position, clone positions, landmarks) plus,
    when the yaw condition holds, the g-rotation column (unit gravity axis
    in the IMU and clone rotation slots, zeros everywhere else; extrinsics
    are body-frame quantities and stay out).
    """
    lay = x.layout()
    cols = []
    for k in range(report.null_dim):
        t = report.null_basis[:, k]
        col = np.zeros(lay.dim)
        col[lay.slice(("pos",))] = t
        for fid in x.clones:
            col[lay.slice(("clone_pos", fid))] = t
        for fid in x.landmarks:
            col[lay.slice(("lm", fid))] = t
        cols.append(col)
    if report.yaw_unobservable:
        axis = np.asarray(g_w, dtype=float)
        axis = axis / np.linalg.norm(axis)
        col = np.zeros(lay.dim)
        col[lay.slice(("att",))] = axis
        for fid in x.clones:
            col[lay.slice(("clone_att", fid))] = axis
        cols.append(col)
    return np.column_stack(cols) if cols else np.zeros((lay.dim, 0))


def numeric_unobservable_directions(x, report, g_w=GRAVITY_W, step=0.1):
    """Same columns, built as central group derivatives of (h act x) - x.

    The action enters through the retraction inverse, so each column is
    d/dh [ (h act x) boxminus x ] at h = 0; the map is exactly linear in
    the group parameter, which keeps the difference quotient at round-off
    accuracy even for a large step.
    """
    cols = []
    for k in range(report.null_dim):
        t = report.null_basis[:, k]
        plus = boxminus(apply_translation(x, step * t), x)
        minus = boxminus(apply_translation(x, -step * t), x)
        cols.append((plus - minus) / (2.0 * step))
    if report.yaw_unobservable:
        plus = boxminus(apply_g_rotation(x, step, g_w), x)
        minus = boxminus(apply_g_rotation(x, -step, g_w), x)
        cols.append((plus - minus) / (2.0 * step))
    dim = x.layout().dim
    return np.column_stack(cols) if cols else np.zeros((dim, 0))


def observability_matrix(h_seq, phi_seq):
    """O = stack_k [ H_k Phi_{k-1} ... Phi_0 ];  len(phi) == len(h) - 1."""
    if len(h_seq) != len(phi_seq) + 1:
        raise ValueError("need one more H than Phi")
    blocks = []
    acc = None
    for k, h in enumerate(h_seq):
        h = np.atleast_2d(h)
        if k == 0:
            blocks.append(h)
            continue
        phi = phi_seq[k - 1]
        acc = phi if acc is None else phi @ acc
        if h.shape[1] != acc.shape[0]:
            raise ValueError("dimension mismatch in observability stack")
        blocks.append(h @ acc)
    return np.vstack([b for b in blocks if b.shape[0] > 0])
