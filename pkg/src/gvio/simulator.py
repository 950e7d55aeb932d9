"""Synthetic truth and sensor streams consistent with the filter models.

Trajectories are closed-form (position, velocity, acceleration and body
rate all analytic), attitude follows the horizontal velocity heading with
a configurable constant pitch, and every generated measurement evaluates
to zero residual under the corresponding filter-side prediction at ground
truth with zero noise.  Generation is a pure function of the scenario
config including its seed.

Dataset layout (CSV, comma separated, '#' headers with a schema version):

    imu.csv         t_s, wx, wy, wz, ax, ay, az
    features.csv    t_s, frame_id, cam, feature_id, u, v
    gnss.csv        t_s, constellation, sat_id, px, py, pz, vx, vy, vz,
                    pseudorange_m, rangerate_mps, sat_clk_m,
                    sat_clkdrift_mps, delay_m
    groundtruth.csv t_s, px, py, pz, qw, qx, qy, qz, vx, vy, vz,
                    bgx..bgz, bax..baz, clk_{gps,bds,gal,glo}_m,
                    clkdrift_mps

Floats are serialized with 17 significant digits so a write/read round
trip is bit exact.  groundtruth.csv is optional on read (estimation-only
mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .errors import DatasetError
from .geometry import (
    GRAVITY_W,
    GeodeticPoint,
    Pose,
    enu_rotation,
    geodetic_to_ecef,
    quat_to_rot,
    rot_to_quat,
)
from .gnss import SatelliteObservation
from .state import CONSTELLATIONS

_MU_EARTH = 3.986004418e14


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# camera axes in body coordinates: optical axis along body +x, image right
# along -y (body y is left), image down along -z
_CAM_IN_BODY = np.array([[0.0, 0.0, 1.0],
                         [-1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0]])


def camera_extrinsics(camera_cfg):
    """True camera-from-body pose used by generation and as filter prior."""
    pitch = math.radians(camera_cfg.mount_pitch_deg)
    rot = _rot_y(pitch) @ _CAM_IN_BODY
    lever = np.array([0.06, 0.0, -0.02])
    return Pose(rot, lever)


def stereo_extrinsics(camera_cfg):
    """Right-from-left transform, right camera at +baseline along left x."""
    if not camera_cfg.stereo:
        return None
    return Pose(np.eye(3), np.array([-camera_cfg.baseline, 0.0, 0.0]))


def eval_trajectory(spec, t):
    """Closed-form (pose, velocity, world acceleration, body rate) at t."""
    if not 0.0 <= t <= spec.duration + 1e-9:
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    kind = spec.kind
    h = spec.height
    if kind == "static":
        pos = np.array([0.0, 0.0, h])
        vel = np.zeros(3)
        acc = np.zeros(3)
        yaw, yaw_rate = spec.heading, 0.0
    elif kind == "line":
        d = np.array([math.cos(spec.heading), math.sin(spec.heading), 0.0])
        pos = d * spec.speed * t + np.array([0.0, 0.0, h])
        vel = d * spec.speed
        acc = np.zeros(3)
        yaw, yaw_rate = spec.heading, 0.0
    elif kind in ("circle", "helix"):
        w = spec.speed / spec.radius
        ang = w * t
        r = spec.radius
        climb = spec.climb_rate if kind == "helix" else 0.0
        pos = np.array([r * math.cos(ang), r * math.sin(ang), h + climb * t])
        vel = np.array([-r * w * math.sin(ang), r * w * math.cos(ang), climb])
        acc = np.array([-r * w * w * math.cos(ang),
                        -r * w * w * math.sin(ang), 0.0])
        yaw, yaw_rate = ang + math.pi / 2.0, w
    elif kind == "figure8":
        w = 2.0 * math.pi / spec.period
        ax_, ay_ = spec.amp_x, spec.amp_y
        pos = np.array([ax_ * math.sin(w * t),
                        0.5 * ay_ * math.sin(2.0 * w * t), h])
        vel = np.array([ax_ * w * math.cos(w * t),
                        ay_ * w * math.cos(2.0 * w * t), 0.0])
        acc = np.array([-ax_ * w * w * math.sin(w * t),
                        -2.0 * ay_ * w * w * math.sin(2.0 * w * t), 0.0])
        v2 = vel[0] ** 2 + vel[1] ** 2
        yaw = math.atan2(vel[1], vel[0])
        yaw_rate = (vel[0] * acc[1] - vel[1] * acc[0]) / v2
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    rot = _rot_z(yaw) @ _rot_y(-spec.pitch)
    omega_body = yaw_rate * (rot.T @ np.array([0.0, 0.0, 1.0]))
    return Pose(rot, pos), vel, acc, omega_body


@dataclass
class GroundTruth:
    t: np.ndarray
    rot: np.ndarray        # (K, 3, 3)
    pos: np.ndarray
    vel: np.ndarray
    accel_w: np.ndarray
    omega_body: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    clock: np.ndarray      # (K, 4), meters, fixed constellation order
    drift: np.ndarray      # (K,), m/s
    # interval-midpoint kinematics for sensor generation (in-memory only)
    rot_mid: np.ndarray = None
    accel_w_mid: np.ndarray = None
    omega_mid: np.ndarray = None

    def index_of(self, t):
        i = int(round(t * (len(self.t) - 1) / (self.t[-1] - self.t[0]))) \
            if len(self.t) > 1 else 0
        if not math.isclose(self.t[i], t, abs_tol=1e-9):
            raise DatasetError(f"no ground-truth sample at t={t}")
        return i


@dataclass
class Dataset:
    imu_t: np.ndarray
    imu_w: np.ndarray
    imu_a: np.ndarray
    frames: list           # (t, frame_id, [(feature_id, cam, u, v), ...])
    gnss: list             # (t, [SatelliteObservation, ...])
    truth: GroundTruth = None
    true_t_w_ecef: Pose = None


def sample_truth(cfg, rng_clock, rng_bias):
    spec = cfg.trajectory
    k = int(round(spec.duration * cfg.imu_rate)) + 1
    dt = 1.0 / cfg.imu_rate
    t = np.arange(k) * dt
    rot = np.empty((k, 3, 3))
    pos = np.empty((k, 3))
    vel = np.empty((k, 3))
    acc = np.empty((k, 3))
    omg = np.empty((k, 3))
    for i, ti in enumerate(t):
        pose, v, a, w = eval_trajectory(spec, min(ti, spec.duration))
        rot[i], pos[i], vel[i], acc[i], omg[i] = pose.rot, pose.trans, v, a, w
    # midpoint kinematics: a zero-order-hold consumer of the samples then
    # matches the true motion to second order instead of first
    rot_mid = np.empty((k, 3, 3))
    acc_mid = np.empty((k, 3))
    omg_mid = np.empty((k, 3))
    for i in range(k):
        tm = min(t[i] + 0.5 * dt, spec.duration)
        pose, _, a, w = eval_trajectory(spec, tm)
        rot_mid[i], acc_mid[i], omg_mid[i] = pose.rot, a, w

    n = cfg.noise
    sdt = math.sqrt(dt)
    bg = np.vstack([np.zeros(3),
                    np.cumsum(rng_bias.standard_normal((k - 1, 3))
                              * n.gyro_bias_walk * sdt, axis=0)])
    ba = np.vstack([np.zeros(3),
                    np.cumsum(rng_bias.standard_normal((k - 1, 3))
                              * n.accel_bias_walk * sdt, axis=0)])

    g = cfg.gnss
    clk0 = g.initial_clock_bias * rng_clock.uniform(-1.0, 1.0, 4) * 100.0
    f0 = g.initial_clock_drift
    drift = np.empty(k)
    clock = np.empty((k, 4))
    drift[0] = f0
    clock[0] = clk0
    wd = rng_clock.standard_normal(k - 1) * n.clock_drift_walk * sdt
    wb = rng_clock.standard_normal((k - 1, 4)) * n.clock_bias_walk * sdt
    for i in range(k - 1):
        clock[i + 1] = clock[i] + drift[i] * dt + wb[i]
        drift[i + 1] = drift[i] + wd[i]
    return GroundTruth(t=t, rot=rot, pos=pos, vel=vel, accel_w=acc,
                       omega_body=omg, gyro_bias=bg, accel_bias=ba,
                       clock=clock, drift=drift, rot_mid=rot_mid,
                       accel_w_mid=acc_mid, omega_mid=omg_mid)


def gen_imu(truth, noise, rng):
    """Measured body rate/specific force: truth plus bias plus white noise.

    Each sample is the interval-average (midpoint) kinematic value when the
    truth carries midpoint arrays, mirroring an integrating sensor; the
    timestamp marks the interval start.
    """
    k = len(truth.t)
    dt = float(truth.t[1] - truth.t[0])
    rate = 1.0 / dt
    ngn = rng.standard_normal((k, 3)) * noise.gyro_noise_density * math.sqrt(rate)
    nan_ = rng.standard_normal((k, 3)) * noise.accel_noise_density * math.sqrt(rate)
    omega = truth.omega_mid if truth.omega_mid is not None else truth.omega_body
    rot = truth.rot_mid if truth.rot_mid is not None else truth.rot
    acc = truth.accel_w_mid if truth.accel_w_mid is not None else truth.accel_w
    w_m = omega + truth.gyro_bias + ngn
    a_m = np.empty((k, 3))
    for i in range(k):
        a_m[i] = rot[i].T @ (acc[i] - GRAVITY_W) \
            + truth.accel_bias[i] + nan_[i]
    return w_m, a_m


def gen_landmarks(cfg, rng):
    c = np.asarray(cfg.landmarks.box_center)
    s = np.asarray(cfg.landmarks.box_size)
    return c + (rng.uniform(-0.5, 0.5, (cfg.landmarks.count, 3)) * s)


def gen_features(truth, landmarks, cfg, rng):
    """Per-image tracks: persistent ids, FOV cone and depth visibility,
    lifetime-capped tracking, at most max_features per frame."""
    cam = cfg.camera
    step = int(round((1.0 / (truth.t[1] - truth.t[0])) / cam.rate))
    t_cb = camera_extrinsics(cam)
    stereo = stereo_extrinsics(cam)
    cos_half = math.cos(math.radians(cam.fov_deg) / 2.0)
    sigma = cfg.noise.meas_sigma
    first_tracked = {}
    frames = []
    frame_id = 0
    for i in range(0, len(truth.t), step):
        body = Pose(truth.rot[i], truth.pos[i])
        cam_left = body.compose(t_cb)
        p_cam = (landmarks - cam_left.trans) @ cam_left.rot  # row form R^T(p-t)
        z = p_cam[:, 2]
        rad = np.linalg.norm(p_cam, axis=1)
        visible = ((z > cam.depth_min) & (z < cam.depth_max)
                   & (z >= cos_half * rad))
        obs = []
        count = 0
        for fid in np.nonzero(visible)[0]:
            fid = int(fid)
            born = first_tracked.get(fid)
            if born is not None and frame_id - born >= cam.feature_lifetime:
                continue
            if count >= cam.max_features:
                break
            if born is None:
                first_tracked[fid] = frame_id
            count += 1
            uv = p_cam[fid, :2] / z[fid] + rng.standard_normal(2) * sigma
            obs.append((fid, 0, float(uv[0]), float(uv[1])))
            if stereo is not None:
                p_r = stereo.apply(p_cam[fid])
                if p_r[2] > cam.depth_min:
                    uv_r = p_r[:2] / p_r[2] + rng.standard_normal(2) * sigma
                    obs.append((fid, 1, float(uv_r[0]), float(uv_r[1])))
        frames.append((float(truth.t[i]), frame_id, obs))
        frame_id += 1
    return frames


def true_alignment(cfg):
    g = cfg.gnss
    origin = GeodeticPoint(math.radians(g.origin_lat_deg),
                           math.radians(g.origin_lon_deg), g.origin_height)
    o_ecef = geodetic_to_ecef(origin)
    r_eo = enu_rotation(origin)
    t_enu_ecef = Pose(r_eo, o_ecef)
    t_w_enu = Pose(_rot_z(g.world_yaw), np.asarray(g.world_offset, dtype=float))
    return t_enu_ecef.compose(t_w_enu)


def build_constellations(cfg):
    """Satellite initial states from the geometry seed: directions above
    the elevation floor as seen from the ENU origin, placed on circular
    orbits of the configured radius (or pinned in place for unit tests)."""
    g = cfg.gnss
    rng = np.random.default_rng(g.geometry_seed)
    origin = GeodeticPoint(math.radians(g.origin_lat_deg),
                           math.radians(g.origin_lon_deg), g.origin_height)
    o_ecef = geodetic_to_ecef(origin)
    r_eo = enu_rotation(origin)
    sats = []
    counts = {"GPS": g.sats_gps, "BDS": g.sats_bds,
              "GAL": g.sats_gal, "GLO": g.sats_glo}
    rate = math.sqrt(_MU_EARTH / g.orbit_radius ** 3)
    for const in CONSTELLATIONS:
        for sid in range(counts[const]):
            az = rng.uniform(0.0, 2.0 * math.pi)
            el = rng.uniform(math.radians(g.elevation_floor_deg),
                             math.radians(85.0))
            d_enu = np.array([math.cos(el) * math.sin(az),
                              math.cos(el) * math.cos(az), math.sin(el)])
            d = r_eo @ d_enu
            # origin + s d on the orbit sphere
            b = float(o_ecef @ d)
            s = -b + math.sqrt(b * b + g.orbit_radius ** 2 - float(o_ecef @ o_ecef))
            pos0 = o_ecef + s * d
            axis = np.cross(pos0, rng.standard_normal(3))
            axis /= np.linalg.norm(axis)
            clk0 = rng.uniform(-100.0, 100.0)
            clk_drift = rng.uniform(-0.02, 0.02)
            sats.append({"const": const, "sid": sid, "pos0": pos0,
                         "axis": axis, "rate": 0.0 if g.static_satellites else rate,
                         "clk0": clk0, "clk_drift": clk_drift})
    return sats


def _sat_state(sat, t):
    ang = sat["rate"] * t
    if ang == 0.0:
        return sat["pos0"].copy(), np.zeros(3)
    axis = sat["axis"]
    k = axis
    p0 = sat["pos0"]
    c, s = math.cos(ang), math.sin(ang)
    pos = c * p0 + s * np.cross(k, p0) + (1 - c) * k * float(k @ p0)
    vel = sat["rate"] * np.cross(k, pos)
    return pos, vel


def gen_gnss(truth, cfg, rng, sats=None, t_w_ecef=None):
    """Per-epoch raw observations with clock/delay/noise per the models."""
    g = cfg.gnss
    if sats is None:
        sats = build_constellations(cfg)
    if t_w_ecef is None:
        t_w_ecef = true_alignment(cfg)
    dt = float(truth.t[1] - truth.t[0])
    step = int(round((1.0 / dt) / g.rate))
    sigma_pr = cfg.noise.pseudorange_sigma
    sigma_rr = cfg.noise.rangerate_sigma
    epochs = []
    for i in range(0, len(truth.t), step):
        t = float(truth.t[i])
        visible = sats
        for (t0, t1, keep) in g.dropout_windows:
            if t0 <= t <= t1:
                visible = sats[:int(keep)]
                break
        recv = t_w_ecef.apply(truth.pos[i])
        v_recv = t_w_ecef.rot @ truth.vel[i]
        geodetic_up = enu_rotation_from_ecef(recv)[:, 2]
        obs = []
        for sat in visible:
            pos, vel = _sat_state(sat, t)
            d = pos - recv
            rng_m = float(np.linalg.norm(d))
            n = d / rng_m
            sin_el = max(float(n @ geodetic_up), math.sin(math.radians(5.0)))
            delay = g.delay_d0 + g.delay_d1 / sin_el
            ci = CONSTELLATIONS.index(sat["const"])
            sat_clk = sat["clk0"] + sat["clk_drift"] * t
            pr = (rng_m + truth.clock[i, ci] - sat_clk + delay
                  + g.delay_mismatch + rng.standard_normal() * sigma_pr)
            rr = (-float(n @ (v_recv - vel)) + truth.drift[i]
                  - sat["clk_drift"] + rng.standard_normal() * sigma_rr)
            obs.append(SatelliteObservation(
                constellation=sat["const"], sat_id=sat["sid"], sat_pos=pos,
                sat_vel=vel, pseudorange=pr, range_rate=rr,
                sat_clock_bias=sat_clk, sat_clock_drift=sat["clk_drift"],
                delay=delay))
        epochs.append((t, obs))
    return epochs


def enu_rotation_from_ecef(p_ecef):
    from .geometry import ecef_to_geodetic
    return enu_rotation(ecef_to_geodetic(p_ecef))


def simulate_scenario(cfg):
    """Full dataset from a scenario config; deterministic in the seed."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_bias = np.random.default_rng(children[0])
    rng_clock = np.random.default_rng(children[1])
    rng_imu = np.random.default_rng(children[2])
    rng_lm = np.random.default_rng(children[3])
    rng_meas = np.random.default_rng(children[4])

    truth = sample_truth(cfg, rng_clock, rng_bias)
    w_m, a_m = gen_imu(truth, cfg.noise, rng_imu)
    landmarks = gen_landmarks(cfg, rng_lm)
    frames = gen_features(truth, landmarks, cfg, rng_meas)
    t_w_ecef = true_alignment(cfg)
    sats = build_constellations(cfg)
    gnss = gen_gnss(truth, cfg, rng_meas, sats, t_w_ecef)
    return Dataset(imu_t=truth.t.copy(), imu_w=w_m, imu_a=a_m, frames=frames,
                   gnss=gnss, truth=truth, true_t_w_ecef=t_w_ecef)


# ---------------------------------------------------------------------------
# CSV round trip


def _fmt(v):
    return format(float(v), ".17g")


def _write_lines(path, kind, columns, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# gvio-dataset {kind} v1\n")
        fh.write("# " + ",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def write_dataset(ds, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "imu.csv", "imu",
                 ["t_s", "wx", "wy", "wz", "ax", "ay", "az"],
                 ([_fmt(t)] + [_fmt(v) for v in w] + [_fmt(v) for v in a]
                  for t, w, a in zip(ds.imu_t, ds.imu_w, ds.imu_a)))
    feat_rows = []
    for t, frame_id, obs in ds.frames:
        for fid, cam, u, v in obs:
            feat_rows.append([_fmt(t), str(frame_id), str(cam), str(fid),
                              _fmt(u), _fmt(v)])
    _write_lines(out / "features.csv", "features",
                 ["t_s", "frame_id", "cam", "feature_id", "u", "v"], feat_rows)
    gnss_rows = []
    for t, obs_list in ds.gnss:
        for o in obs_list:
            gnss_rows.append(
                [_fmt(t), str(CONSTELLATIONS.index(o.constellation)),
                 str(o.sat_id)]
                + [_fmt(v) for v in o.sat_pos] + [_fmt(v) for v in o.sat_vel]
                + [_fmt(o.pseudorange), _fmt(o.range_rate),
                   _fmt(o.sat_clock_bias), _fmt(o.sat_clock_drift),
                   _fmt(o.delay)])
    _write_lines(out / "gnss.csv", "gnss",
                 ["t_s", "constellation", "sat_id", "px", "py", "pz",
                  "vx", "vy", "vz", "pseudorange_m", "rangerate_mps",
                  "sat_clk_m", "sat_clkdrift_mps", "delay_m"], gnss_rows)
    if ds.truth is not None:
        tr = ds.truth
        rows = []
        for i in range(len(tr.t)):
            q = rot_to_quat(tr.rot[i])
            rows.append([_fmt(tr.t[i])] + [_fmt(v) for v in tr.pos[i]]
                        + [_fmt(v) for v in q] + [_fmt(v) for v in tr.vel[i]]
                        + [_fmt(v) for v in tr.gyro_bias[i]]
                        + [_fmt(v) for v in tr.accel_bias[i]]
                        + [_fmt(v) for v in tr.clock[i]]
                        + [_fmt(tr.drift[i])])
        _write_lines(out / "groundtruth.csv", "groundtruth",
                     ["t_s", "px", "py", "pz", "qw", "qx", "qy", "qz",
                      "vx", "vy", "vz", "bgx", "bgy", "bgz",
                      "bax", "bay", "baz", "clk_gps_m", "clk_bds_m",
                      "clk_gal_m", "clk_glo_m", "clkdrift_mps"], rows)


def _read_rows(path, kind, n_cols):
    if not path.exists():
        raise DatasetError(f"missing {path.name}")
    rows = []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(f"# gvio-dataset {kind}"):
            raise DatasetError(f"{path.name}: bad or missing schema header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DatasetError(
                    f"{path.name} line {lineno}: expected {n_cols} fields, "
                    f"got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DatasetError(
                    f"{path.name} line {lineno}: {exc}") from exc
    return rows


def read_dataset(in_dir):
    src = Path(in_dir)
    imu = _read_rows(src / "imu.csv", "imu", 7)
    if not imu:
        raise DatasetError("imu.csv has no samples")
    imu = np.array(imu)
    feats = _read_rows(src / "features.csv", "features", 6)
    frames_map = {}
    for t, frame_id, cam, fid, u, v in feats:
        key = int(frame_id)
        frames_map.setdefault(key, (t, []))[1].append(
            (int(fid), int(cam), u, v))
    frames = [(frames_map[k][0], k, frames_map[k][1])
              for k in sorted(frames_map)]
    gnss_rows = _read_rows(src / "gnss.csv", "gnss", 14)
    epochs_map = {}
    for row in gnss_rows:
        t = row[0]
        obs = SatelliteObservation(
            constellation=CONSTELLATIONS[int(row[1])], sat_id=int(row[2]),
            sat_pos=np.array(row[3:6]), sat_vel=np.array(row[6:9]),
            pseudorange=row[9], range_rate=row[10], sat_clock_bias=row[11],
            sat_clock_drift=row[12], delay=row[13])
        epochs_map.setdefault(t, []).append(obs)
    gnss = [(t, epochs_map[t]) for t in sorted(epochs_map)]

    truth = None
    gt_path = src / "groundtruth.csv"
    if gt_path.exists():
        rows = np.array(_read_rows(gt_path, "groundtruth", 22))
        rot = np.array([quat_to_rot(q) for q in rows[:, 4:8]])
        truth = GroundTruth(
            t=rows[:, 0], rot=rot, pos=rows[:, 1:4], vel=rows[:, 8:11],
            accel_w=np.zeros((len(rows), 3)),
            omega_body=np.zeros((len(rows), 3)),
            gyro_bias=rows[:, 11:14], accel_bias=rows[:, 14:17],
            clock=rows[:, 17:21], drift=rows[:, 21])
    return Dataset(imu_t=imu[:, 0], imu_w=imu[:, 1:4], imu_a=imu[:, 4:7],
                   frames=frames, gnss=gnss, truth=truth)
