"""Controlled observability studies over a scenario.

The study freezes the layout (no marginalization, no clock states): the
state carries the IMU block plus one clone per analysis instant plus a
handful of landmarks, all placed from the true trajectory.  Transition
and measurement Jacobians are evaluated at independently noise-perturbed
copies of the truth, mirroring how a running filter linearizes at its
estimates, and GNSS enters through the clock-free single differences with
satellite directions frozen at the window start.  The stacked matrix is
then tested against the candidate unobservable directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ExtendedPose, Pose
from .gnss import Alignment, receiver_to_sat_unit, single_difference_jacobians
from .propagation import transition_matrix
from .simulator import (
    build_constellations,
    camera_extrinsics,
    eval_trajectory,
    gen_landmarks,
    true_alignment,
    _sat_state,
)
from .state import Landmark, NavState, boxplus
from .symmetry import (
    classify_degeneracy,
    observability_matrix,
    unobservable_directions,
)
from .vision import VisionConfig, visual_jacobians


@dataclass
class ObservabilityStudy:
    o_matrix: np.ndarray
    directions: np.ndarray
    column_residuals: np.ndarray     # ||O n|| / sigma_max(O) per column
    restricted_ratio: float          # sigma_min(O V)/sigma_max(O), V = span(N)
    report: object
    null_dim: int
    yaw_retained: bool
    state_dim: int


def observability_study(scenario, n_steps=20, n_landmarks=8,
                        perturb=1e-3, seed=0, use_gnss=None):
    """Build the window, stack O, and score the candidate directions."""
    scenario.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0B5)))
    spec = scenario.trajectory
    dt = 1.0 / scenario.camera.rate
    times = [k * dt for k in range(n_steps + 1)]
    if times[-1] > spec.duration:
        raise ValueError("scenario too short for the analysis window")

    x = NavState(imu=ExtendedPose(np.eye(3), np.zeros(3), np.zeros(3)),
                 estimate_extrinsics=False)
    truths = []
    for t in times:
        pose, vel, acc, omega = eval_trajectory(spec, t)
        truths.append((pose, vel, acc, omega))
        x.clones[len(x.clones)] = Pose(pose.rot.copy(), pose.trans.copy())
        x.clone_times[len(x.clone_times)] = t
    pose0, vel0, _, _ = truths[0]
    x.imu = ExtendedPose(pose0.rot.copy(), pose0.trans.copy(), vel0.copy())

    # landmarks in front of the first camera, anchored to the first clone
    cam0 = x.clones[0]
    candidates = gen_landmarks(scenario, rng)
    picked = []
    for pt in candidates:
        p_cam = cam0.rot.T @ (pt - cam0.trans)
        if p_cam[2] > 1.0:
            picked.append(pt)
        if len(picked) >= n_landmarks:
            break
    for j, pt in enumerate(picked):
        x.landmarks[900 + j] = Landmark(np.asarray(pt, float), 0)
    lay = x.layout()

    n_sats = (scenario.gnss.sats_gps + scenario.gnss.sats_bds
              + scenario.gnss.sats_gal + scenario.gnss.sats_glo)
    if use_gnss is None:
        use_gnss = n_sats >= 2
    align = Alignment(true_alignment(scenario))
    sat_units = []
    sat_obs_pos = []
    if use_gnss and n_sats:
        recv0 = align.t_w_ecef.apply(x.imu.pos)
        for sat in build_constellations(scenario):
            pos, _ = _sat_state(sat, 0.0)
            sat_obs_pos.append(pos)
            sat_units.append(receiver_to_sat_unit(recv0, pos))

    report = classify_degeneracy(sat_units, align.t_w_ecef.rot,
                                 x.imu.pos, x.imu.vel)
    directions = unobservable_directions(x, report)

    vcfg = VisionConfig()
    h_seq, phi_seq = [], []
    for k in range(n_steps + 1):
        pose_k, vel_k, acc_k, omega_k = truths[k]
        xk = x.copy()
        xk.imu = ExtendedPose(pose_k.rot.copy(), pose_k.trans.copy(),
                              vel_k.copy())
        xk_hat = boxplus(xk, rng.standard_normal(lay.dim) * perturb)
        rows = []
        for fid, lm in xk_hat.landmarks.items():
            out = visual_jacobians(xk_hat, lay, lm.position, k, 0,
                                   lm.anchor_frame, np.zeros(2), vcfg)
            if out is None:
                continue
            h_x, h_f, _ = out
            h_x[:, lay.slice(("lm", fid))] = h_f
            rows.append(h_x)
        for i in range(1, len(sat_units)):
            rows.append(single_difference_jacobians(
                xk_hat, lay, align, None, None,
                n_k=sat_units[i], n_l=sat_units[i - 1]))
        h_seq.append(np.vstack(rows) if rows else np.zeros((0, lay.dim)))
        if k < n_steps:
            a_body = pose_k.rot.T @ (acc_k - np.array([0.0, 0.0, -9.81]))
            phi_seq.append(transition_matrix(xk_hat, omega_k, a_body, dt))

    o = observability_matrix(h_seq, phi_seq)
    scale = np.linalg.norm(o, 2)
    resid = np.array([np.linalg.norm(o @ directions[:, j]) / scale
                      for j in range(directions.shape[1])])
    restricted = float("nan")
    if directions.shape[1]:
        q, _ = np.linalg.qr(directions)
        sv = np.linalg.svd(o @ q, compute_uv=False)
        restricted = float(sv[-1] / scale)
    return ObservabilityStudy(
        o_matrix=o, directions=directions, column_residuals=resid,
        restricted_ratio=restricted, report=report,
        null_dim=report.null_dim, yaw_retained=report.yaw_unobservable,
        state_dim=lay.dim)


def write_observability_report(study, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sv = np.linalg.svd(study.o_matrix, compute_uv=False)
    with open(out / "observability.csv", "w", newline="\n") as fh:
        fh.write("# gvio-run observability v1\n")
        fh.write("# key,value\n")
        fh.write(f"state_dim,{study.state_dim}\n")
        fh.write(f"null_dim,{study.null_dim}\n")
        fh.write(f"yaw_unobservable,{study.yaw_retained}\n")
        for name, val in study.report.conditions_checked.items():
            fh.write(f"condition_{name},{val:.17g}\n")
        for j, r in enumerate(study.column_residuals):
            fh.write(f"direction_{j}_residual,{r:.17g}\n")
        fh.write(f"restricted_min_ratio,{study.restricted_ratio:.17g}\n")
        fh.write(f"sigma_max,{sv[0]:.17g}\n")
        fh.write(f"sigma_min,{sv[-1]:.17g}\n")
    return out / "observability.csv"
