"""Filter state, its invariant error parameterization, and generic updates.

The state couples translation-type quantities to rotation perturbations
through the gamma series: for the IMU block

    R = gamma0(dth) Rhat
    p = gamma0(dth) phat + gamma1(dth) dp
    v = gamma0(dth) vhat + gamma1(dth) dv

with the same pattern (own dth) for the camera extrinsics and every cloned
pose.  A landmark borrows the rotation perturbation of its *anchor* clone:

    p_f = gamma0(dth_anchor) phat_f + gamma1(dth_anchor) dp_f

Biases and receiver-clock states are plain additive.  Error-vector layout
is fixed: IMU (dth, dp, dv, dbg, dba), extrinsics (dth_c, dp_c), clones in
time order (6 each), landmarks in id order (3 each), one clock-bias slot
per tracked constellation in fixed constellation order, then clock drift.
Clock biases are stored premultiplied by the speed of light (meters) and
the drift in m/s, so measurement Jacobian entries for them are exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InitializationRejected, NumericalError
from ._kernels import retract_blocks, retract_points, symmetrize_inplace
from .geometry import ExtendedPose, Pose, gamma, gamma01, skew, so3_log

# Fixed layout order of constellation clock-bias slots.
CONSTELLATIONS = ("GPS", "BDS", "GAL", "GLO")


@dataclass
class Landmark:
    """World-frame point position plus the clone it is anchored to."""

    position: np.ndarray
    anchor_frame: int

    def copy(self):
        return Landmark(self.position.copy(), self.anchor_frame)


@dataclass
class NavState:
    imu: ExtendedPose
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extrinsics: Pose = field(default_factory=Pose.identity)
    clones: dict = field(default_factory=dict)        # frame_id -> Pose, time order
    clone_times: dict = field(default_factory=dict)   # frame_id -> timestamp
    landmarks: dict = field(default_factory=dict)     # feature_id -> Landmark
    clock_biases: dict = field(default_factory=dict)  # constellation -> c*t (m)
    clock_drift: float = 0.0                          # c*f (m/s)
    estimate_extrinsics: bool = True

    def copy(self):
        return NavState(
            imu=self.imu.copy(),
            gyro_bias=self.gyro_bias.copy(),
            accel_bias=self.accel_bias.copy(),
            extrinsics=self.extrinsics.copy(),
            clones={k: v.copy() for k, v in self.clones.items()},
            clone_times=dict(self.clone_times),
            landmarks={k: v.copy() for k, v in self.landmarks.items()},
            clock_biases=dict(self.clock_biases),
            clock_drift=self.clock_drift,
            estimate_extrinsics=self.estimate_extrinsics,
        )

    def layout(self):
        return StateLayout.from_state(self)

    def check_invariants(self):
        for fid, lm in self.landmarks.items():
            if lm.anchor_frame not in self.clones:
                raise ValueError(f"landmark {fid} anchored to missing frame "
                                 f"{lm.anchor_frame}")
        times = list(self.clone_times[f] for f in self.clones)
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("clone timestamps not strictly increasing")


class StateLayout:
    """Ordered (key, dim, offset) table for the error vector of a NavState."""

    def __init__(self, entries):
        self.entries = list(entries)  # (key, dim)
        self._offsets = {}
        off = 0
        for key, dim in self.entries:
            self._offsets[key] = (off, dim)
            off += dim
        self.dim = off

    @classmethod
    def from_state(cls, x):
        entries = [(("att",), 3), (("pos",), 3), (("vel",), 3),
                   (("bg",), 3), (("ba",), 3)]
        if x.estimate_extrinsics:
            entries += [(("ext_att",), 3), (("ext_pos",), 3)]
        for fid in x.clones:
            entries += [(("clone_att", fid), 3), (("clone_pos", fid), 3)]
        for fid in sorted(x.landmarks):
            entries.append((("lm", fid), 3))
        for const in CONSTELLATIONS:
            if const in x.clock_biases:
                entries.append((("clk", const), 1))
        if x.clock_biases:
            entries.append((("drift",), 1))
        return cls(entries)

    def has(self, key):
        return key in self._offsets

    def slice(self, key):
        off, dim = self._offsets[key]
        return slice(off, off + dim)

    def keys(self):
        return [key for key, _ in self.entries]

    def same_as(self, other):
        return self.entries == other.entries


def boxplus(x, delta):
    """Apply an error vector to a state (the invariant retraction above)."""
    lay = x.layout()
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (lay.dim,):
        raise ValueError(f"error vector has dim {delta.shape}, "
                         f"layout needs {lay.dim}")
    dth = delta[lay.slice(("att",))]
    g0, g1 = gamma01(dth)
    imu = ExtendedPose(
        g0 @ x.imu.rot,
        g0 @ x.imu.pos + g1 @ delta[lay.slice(("pos",))],
        g0 @ x.imu.vel + g1 @ delta[lay.slice(("vel",))],
    )
    if x.estimate_extrinsics:
        dth_c = delta[lay.slice(("ext_att",))]
        g0c, g1c = gamma01(dth_c)
        ext = Pose(
            g0c @ x.extrinsics.rot,
            g0c @ x.extrinsics.trans + g1c @ delta[lay.slice(("ext_pos",))],
        )
    else:
        ext = x.extrinsics

    clones = {}
    n_cl = len(x.clones)
    if n_cl:
        fids = list(x.clones)
        rots = np.empty((n_cl, 3, 3))
        trs = np.empty((n_cl, 3))
        for i, fid in enumerate(fids):
            pose = x.clones[fid]
            rots[i] = pose.rot
            trs[i] = pose.trans
        # clone slots are contiguous: (att, pos) x n in layout order
        start = lay.slice(("clone_att", fids[0])).start
        region = delta[start:start + 6 * n_cl].reshape(n_cl, 6)
        dths = np.ascontiguousarray(region[:, 0:3])
        dps = np.ascontiguousarray(region[:, 3:6])
        new_rots, new_trs = retract_blocks(rots, trs, dths, dps)
        clone_index = {}
        for i, fid in enumerate(fids):
            clones[fid] = Pose(new_rots[i], new_trs[i])
            clone_index[fid] = i

    landmarks = {}
    n_lm = len(x.landmarks)
    if n_lm:
        lm_ids = sorted(x.landmarks)
        pts = np.empty((n_lm, 3))
        adths = np.empty((n_lm, 3))
        for i, fid in enumerate(lm_ids):
            lm = x.landmarks[fid]
            pts[i] = lm.position
            adths[i] = dths[clone_index[lm.anchor_frame]]
        start = lay.slice(("lm", lm_ids[0])).start
        ldps = np.ascontiguousarray(
            delta[start:start + 3 * n_lm].reshape(n_lm, 3))
        new_pts = retract_points(pts, adths, ldps)
        for i, fid in enumerate(lm_ids):
            landmarks[fid] = Landmark(new_pts[i],
                                      x.landmarks[fid].anchor_frame)

    clocks = {const: x.clock_biases[const]
              + float(delta[lay.slice(("clk", const))][0])
              for const in x.clock_biases}
    drift = x.clock_drift
    if x.clock_biases:
        drift = drift + float(delta[lay.slice(("drift",))][0])
    return NavState(
        imu=imu,
        gyro_bias=x.gyro_bias + delta[lay.slice(("bg",))],
        accel_bias=x.accel_bias + delta[lay.slice(("ba",))],
        extrinsics=ext, clones=clones, clone_times=dict(x.clone_times),
        landmarks=landmarks, clock_biases=clocks, clock_drift=drift,
        estimate_extrinsics=x.estimate_extrinsics,
    )


def _boxminus_translation(dth, g0, g1, t1, t0):
    # inverse of t1 = g0 t0 + g1 dt
    return np.linalg.solve(g1, t1 - g0 @ t0)


def boxminus(x1, x0):
    """Error vector d with boxplus(x0, d) == x1; exact inverse of boxplus."""
    lay0 = x0.layout()
    lay1 = x1.layout()
    if not lay0.same_as(lay1):
        raise ValueError("state layouts differ")
    anchors0 = {f: lm.anchor_frame for f, lm in x0.landmarks.items()}
    anchors1 = {f: lm.anchor_frame for f, lm in x1.landmarks.items()}
    if anchors0 != anchors1:
        raise ValueError("landmark anchors differ")
    delta = np.zeros(lay0.dim)

    dth = so3_log(x1.imu.rot @ x0.imu.rot.T)
    g0, g1 = gamma(0, dth), gamma(1, dth)
    delta[lay0.slice(("att",))] = dth
    delta[lay0.slice(("pos",))] = _boxminus_translation(dth, g0, g1,
                                                        x1.imu.pos, x0.imu.pos)
    delta[lay0.slice(("vel",))] = _boxminus_translation(dth, g0, g1,
                                                        x1.imu.vel, x0.imu.vel)
    delta[lay0.slice(("bg",))] = x1.gyro_bias - x0.gyro_bias
    delta[lay0.slice(("ba",))] = x1.accel_bias - x0.accel_bias

    if x0.estimate_extrinsics:
        dth_c = so3_log(x1.extrinsics.rot @ x0.extrinsics.rot.T)
        g0c, g1c = gamma(0, dth_c), gamma(1, dth_c)
        delta[lay0.slice(("ext_att",))] = dth_c
        delta[lay0.slice(("ext_pos",))] = _boxminus_translation(
            dth_c, g0c, g1c, x1.extrinsics.trans, x0.extrinsics.trans)

    clone_gammas = {}
    for fid in x0.clones:
        dth_m = so3_log(x1.clones[fid].rot @ x0.clones[fid].rot.T)
        g0m, g1m = gamma(0, dth_m), gamma(1, dth_m)
        clone_gammas[fid] = (dth_m, g0m, g1m)
        delta[lay0.slice(("clone_att", fid))] = dth_m
        delta[lay0.slice(("clone_pos", fid))] = _boxminus_translation(
            dth_m, g0m, g1m, x1.clones[fid].trans, x0.clones[fid].trans)

    for fid, lm0 in x0.landmarks.items():
        dth_a, g0a, g1a = clone_gammas[lm0.anchor_frame]
        delta[lay0.slice(("lm", fid))] = _boxminus_translation(
            dth_a, g0a, g1a, x1.landmarks[fid].position, lm0.position)

    for const in x0.clock_biases:
        delta[lay0.slice(("clk", const))] = (x1.clock_biases[const]
                                             - x0.clock_biases[const])
    if x0.clock_biases:
        delta[lay0.slice(("drift",))] = x1.clock_drift - x0.clock_drift
    return delta


def symmetrize(p):
    return 0.5 * (p + p.T)


def kalman_update(x, p, h, r, r_noise):
    """Standard EKF update on the invariant error, Joseph-form covariance.

    The Joseph product is evaluated in its expanded arrangement
    P - B - B^T + K S K^T (B = K H P), which is the same matrix at a cost
    of O(dim^2 rows) instead of O(dim^3).  Raises NumericalError when the
    innovation covariance cannot be factored (signals a modeling bug; the
    update is aborted).
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if h.shape[0] == 0:
        return x, p
    lay = x.layout()
    if h.shape[1] != lay.dim:
        raise ValueError(f"H has {h.shape[1]} columns, layout dim {lay.dim}")
    r_noise = np.atleast_2d(np.asarray(r_noise, dtype=float))
    hp = h @ p
    s = symmetrize(hp @ h.T + r_noise)
    try:
        gain = np.linalg.solve(s, hp).T  # K = P H^T S^-1, S symmetric
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance not invertible") from exc
    dx = gain @ r
    x_new = boxplus(x, dx)
    if np.abs(np.diag(p)).max() > 1e6:
        # near-infinite priors (delayed-init style) cancel catastrophically
        # in the expanded arrangement; use the factored product there
        ikh = np.eye(lay.dim) - gain @ h
        p_new = ikh @ p @ ikh.T + gain @ r_noise @ gain.T
    else:
        b = gain @ hp
        p_new = p - b - b.T + gain @ s @ gain.T
    return x_new, symmetrize_inplace(p_new)


def _permuted_insert(p_old, lay_old, lay_new, new_keys, cross, block):
    """Grow covariance, inserting the new block at its layout position.

    cross is cov(new, old) in the old layout order, block is cov(new, new).
    The new keys always occupy one contiguous span of the new layout, so
    this is a block copy rather than a general permutation.
    """
    b = block.shape[0]
    d_old = lay_old.dim
    q = lay_new.slice(new_keys[0]).start
    span = sum(lay_new._offsets[k][1] for k in new_keys)
    if span != b or lay_new.slice(new_keys[-1]).stop - q != b:
        raise AssertionError("new keys not contiguous in the layout")
    out = np.empty((d_old + b, d_old + b))
    out[:q, :q] = p_old[:q, :q]
    out[:q, q + b:] = p_old[:q, q:]
    out[q + b:, :q] = p_old[q:, :q]
    out[q + b:, q + b:] = p_old[q:, q:]
    out[q:q + b, :q] = cross[:, :q]
    out[q:q + b, q + b:] = cross[:, q:]
    out[:q, q:q + b] = cross[:, :q].T
    out[q + b:, q:q + b] = cross[:, q:].T
    out[q:q + b, q:q + b] = block
    return symmetrize(out)


def augment_clone(x, p, frame_id, timestamp):
    """Clone the current (left) camera pose into the state.

    New clone pose: (R_i R_c, R_i p_c + p_i).  The covariance is extended
    with J P J^T blocks, J being the Jacobian of the clone's error with
    respect to the IMU and extrinsic errors under the invariant
    parameterization:

        dth_clone = dth_i + R_i dth_c
        dp_clone  = dp_i + (p_i)^ R_i dth_c + R_i dp_c
    """
    if frame_id in x.clones:
        raise ValueError(f"duplicate clone frame id {frame_id}")
    if x.clone_times and timestamp <= max(x.clone_times.values()):
        raise ValueError("clone timestamp not newer than existing clones")
    lay_old = x.layout()
    r_i, p_i = x.imu.rot, x.imu.pos
    r_c, p_c = x.extrinsics.rot, x.extrinsics.trans

    out = x.copy()
    out.clones[frame_id] = Pose(r_i @ r_c, r_i @ p_c + p_i)
    out.clone_times[frame_id] = timestamp
    lay_new = out.layout()

    jac = np.zeros((6, lay_old.dim))
    jac[0:3, lay_old.slice(("att",))] = np.eye(3)
    jac[3:6, lay_old.slice(("pos",))] = np.eye(3)
    if x.estimate_extrinsics:
        jac[0:3, lay_old.slice(("ext_att",))] = r_i
        jac[3:6, lay_old.slice(("ext_att",))] = skew(p_i) @ r_i
        jac[3:6, lay_old.slice(("ext_pos",))] = r_i
    cross = jac @ p
    block = cross @ jac.T
    new_keys = [("clone_att", frame_id), ("clone_pos", frame_id)]
    p_new = _permuted_insert(p, lay_old, lay_new, new_keys, cross, block)
    return out, p_new


def clone_augmentation_jacobian(x):
    """J used by augment_clone, exposed for finite-difference validation."""
    lay = x.layout()
    jac = np.zeros((6, lay.dim))
    jac[0:3, lay.slice(("att",))] = np.eye(3)
    jac[3:6, lay.slice(("pos",))] = np.eye(3)
    if x.estimate_extrinsics:
        jac[0:3, lay.slice(("ext_att",))] = x.imu.rot
        jac[3:6, lay.slice(("ext_att",))] = skew(x.imu.pos) @ x.imu.rot
        jac[3:6, lay.slice(("ext_pos",))] = x.imu.rot
    return jac


def marginalize(x, p, keys):
    """Delete state components; remaining covariance entries are untouched.

    keys are layout keys, e.g. ("clone", fid) -> both clone slots,
    ("lm", fid), ("clk", const), ("drift",).
    """
    lay = x.layout()
    out = x.copy()
    drop = set()
    for key in keys:
        if key[0] == "clone":
            fid = key[1]
            if fid not in out.clones:
                raise ValueError(f"no clone {fid}")
            for lm_id, lm in out.landmarks.items():
                if lm.anchor_frame == fid:
                    raise ValueError(
                        f"landmark {lm_id} still anchored to clone {fid}; "
                        "change anchors before marginalizing")
            del out.clones[fid]
            del out.clone_times[fid]
            drop.add(("clone_att", fid))
            drop.add(("clone_pos", fid))
        elif key[0] == "lm":
            if key[1] not in out.landmarks:
                raise ValueError(f"no landmark {key[1]}")
            del out.landmarks[key[1]]
            drop.add(key)
        elif key[0] == "clk":
            if key[1] not in out.clock_biases:
                raise ValueError(f"no clock state {key[1]}")
            del out.clock_biases[key[1]]
            drop.add(key)
            if not out.clock_biases:
                out.clock_drift = 0.0
                drop.add(("drift",))
        else:
            raise ValueError(f"cannot marginalize {key}")
    keep = []
    for key, dim in lay.entries:
        if key not in drop:
            sl = lay.slice(key)
            keep.extend(range(sl.start, sl.stop))
    keep = np.asarray(keep, dtype=int)
    return out, p[np.ix_(keep, keep)].copy()


def delayed_init(x, p, new_key, new_value, h_x, h_new, r, r_noise):
    """Insert a new block solved from a residual model r = H_x dx + H_new dn + noise.

    The block value is corrected by H_new^-1 r and cross-covariances are
    populated so subsequent updates are consistent.  Works for landmarks
    (("lm", fid), value Landmark) and clock states (("clk", const) /
    ("drift",), scalar value).
    """
    h_new = np.atleast_2d(np.asarray(h_new, dtype=float))
    b = h_new.shape[0]
    if h_new.shape != (b, b):
        raise InitializationRejected("block Jacobian not square")
    svals = np.linalg.svd(h_new, compute_uv=False)
    if svals[-1] <= 1e-12 * max(svals[0], 1.0):
        raise InitializationRejected("block Jacobian singular")
    lay_old = x.layout()
    h_x = np.zeros((b, lay_old.dim)) if h_x is None else np.atleast_2d(h_x)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    r_noise = np.atleast_2d(np.asarray(r_noise, dtype=float))

    hn_inv = np.linalg.inv(h_new)
    delta = hn_inv @ r
    a = -hn_inv @ h_x
    cross = a @ p
    block = cross @ a.T + hn_inv @ r_noise @ hn_inv.T

    out = x.copy()
    if new_key[0] == "lm":
        lm = new_value
        if lm.anchor_frame not in x.clones:
            raise ValueError(f"anchor frame {lm.anchor_frame} not in state")
        if new_key[1] in x.landmarks:
            raise ValueError(f"landmark {new_key[1]} already in state")
        out.landmarks[new_key[1]] = Landmark(lm.position + delta,
                                             lm.anchor_frame)
        new_keys = [new_key]
    elif new_key[0] == "clk":
        if new_key[1] in x.clock_biases:
            raise ValueError(f"clock {new_key[1]} already in state")
        if not x.clock_biases:
            raise ValueError("add the drift state before the first clock bias")
        out.clock_biases[new_key[1]] = float(new_value + delta[0])
        new_keys = [new_key]
    elif new_key[0] == "clk_and_drift":
        # first constellation: bias and drift enter together (b == 2)
        const = new_key[1]
        if x.clock_biases:
            raise ValueError("clock states already present")
        out.clock_biases[const] = float(new_value[0] + delta[0])
        out.clock_drift = float(new_value[1] + delta[1])
        new_keys = [("clk", const), ("drift",)]
    else:
        raise ValueError(f"cannot delayed-init {new_key}")

    lay_new = out.layout()
    p_new = _permuted_insert(p, lay_old, lay_new, new_keys, cross, block)
    return out, p_new


def is_psd(p, tol_scale=1e-10):
    """PSD up to round-off: smallest eigenvalue >= -tol_scale * trace."""
    w = np.linalg.eigvalsh(symmetrize(p))
    return w.min() >= -tol_scale * max(np.trace(p), 1.0)
