"""Batch estimation loop: timestamp-ordered propagation, visual and GNSS
updates, alignment lifecycle, metrics, and CSV emission.

Event order per run: every IMU sample propagates mean and covariance;
every image augments a clone and runs the per-image visual pipeline; every
GNSS epoch is soft-synchronized to the nearest image when within the
configured tolerance (processed right after that image's visual update)
and handled standalone between images otherwise.  In vio mode GNSS is
skipped entirely.  Before alignment, epochs feed the SPP/least-squares
initializer; fusion starts once the 4-DoF fit is frozen.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    FilterConfig,
    ScenarioConfig,
    gnss_config_from,
    process_noise_from,
    vision_config_from,
)
from .errors import DatasetError, NumericalError
from .geometry import ExtendedPose, GRAVITY_W, rot_to_quat
from .gnss import Alignment, GnssManager, SppError, initialize_alignment, spp_solve
from .metrics import imu_error_vector, nees, summarize, yaw_error
from .simulator import camera_extrinsics, simulate_scenario, stereo_extrinsics
from .state import NavState, augment_clone, boxplus
from .propagation import imu_step
from .vision import VisionProcessor


@dataclass
class RunResult:
    t: np.ndarray
    pos: np.ndarray
    quat: np.ndarray
    vel: np.ndarray
    cov_diag: np.ndarray            # 15 IMU-block variances per row
    err_pos: np.ndarray = None
    err_yaw: np.ndarray = None
    nees15: np.ndarray = None
    events: list = field(default_factory=list)
    summary: object = None
    aligned: bool = False
    mean_image_cost: float = 0.0    # s, augment + visual + paired gnss
    final_state: object = None
    final_cov: object = None


def initial_covariance(x, fcfg):
    lay = x.layout()
    p = np.zeros((lay.dim, lay.dim))
    att = np.eye(3) * fcfg.init_var_orientation
    if fcfg.init_var_yaw >= 0.0:
        # the odometry frame can be pinned to the initial estimate: the
        # world-frame vertical slot of the attitude error is the yaw
        att[2, 2] = fcfg.init_var_yaw
    p[lay.slice(("att",)), lay.slice(("att",))] = att
    p[lay.slice(("pos",)), lay.slice(("pos",))] = np.eye(3) * fcfg.init_var_position
    p[lay.slice(("vel",)), lay.slice(("vel",))] = np.eye(3) * fcfg.init_var_velocity
    p[lay.slice(("bg",)), lay.slice(("bg",))] = np.eye(3) * fcfg.init_var_bias
    p[lay.slice(("ba",)), lay.slice(("ba",))] = np.eye(3) * fcfg.init_var_bias
    if x.estimate_extrinsics:
        for key in (("ext_att",), ("ext_pos",)):
            p[lay.slice(key), lay.slice(key)] = np.eye(3) * fcfg.init_var_extrinsics
    return p


def build_initial_state(ds, fcfg, cam_extr, rng):
    """Estimate at t0: ground truth when available (plus a sampled error
    from the prior when configured), otherwise a static-assumption init
    (roll/pitch from averaged specific force, yaw zero, rest at origin)."""
    if ds.truth is not None:
        x = NavState(imu=ExtendedPose(ds.truth.rot[0].copy(),
                                      ds.truth.pos[0].copy(),
                                      ds.truth.vel[0].copy()),
                     gyro_bias=ds.truth.gyro_bias[0].copy(),
                     accel_bias=ds.truth.accel_bias[0].copy())
    else:
        mean_a = ds.imu_a[:min(len(ds.imu_a), 100)].mean(axis=0)
        # static: specific force ~ R^T (0,0,g), so the third row of R is the
        # measured up direction in the body frame
        z_b = mean_a / np.linalg.norm(mean_a)
        r1 = np.array([1.0, 0.0, 0.0]) - z_b * z_b[0]
        if np.linalg.norm(r1) < 1e-6:
            r1 = np.array([0.0, 1.0, 0.0]) - z_b * z_b[1]
        r1 /= np.linalg.norm(r1)
        rot = np.vstack([r1, np.cross(z_b, r1), z_b])
        x = NavState(imu=ExtendedPose(rot, np.zeros(3), np.zeros(3)))
    x.extrinsics = cam_extr.copy()
    x.estimate_extrinsics = fcfg.estimate_extrinsics
    p = initial_covariance(x, fcfg)
    if fcfg.sample_init_error and rng is not None:
        delta = rng.standard_normal(x.layout().dim) * np.sqrt(np.diag(p))
        x = boxplus(x, delta)
    return x, p


def _pair_gnss_to_images(frames, gnss, tol):
    """Soft synchronization: epoch -> frame when within tol, else standalone."""
    frame_times = np.array([t for t, _, _ in frames]) if frames else np.array([])
    paired = {f_id: [] for _, f_id, _ in frames}
    standalone = []
    for t, obs in gnss:
        if len(frame_times):
            i = int(np.argmin(np.abs(frame_times - t)))
            if abs(frame_times[i] - t) <= tol:
                paired[frames[i][1]].append((t, obs))
                continue
        standalone.append((t, obs))
    return paired, standalone


class _Propagator:
    def __init__(self, ds, noise, trapezoidal):
        self.ds = ds
        self.noise = noise
        self.trapezoidal = trapezoidal
        self.k = 0
        self.cur_t = float(ds.imu_t[0])

    def advance(self, x, p, t_target):
        ds = self.ds
        while True:
            nxt = (float(ds.imu_t[self.k + 1])
                   if self.k + 1 < len(ds.imu_t) else math.inf)
            stop = min(nxt, t_target)
            dt = stop - self.cur_t
            if dt > 1e-12:
                w, a = ds.imu_w[self.k], ds.imu_a[self.k]
                x, p = imu_step(x, p, w, a, dt, self.noise, self.trapezoidal)
                self.cur_t = stop
            if nxt <= t_target:
                self.k += 1
                self.cur_t = nxt if self.cur_t < nxt else self.cur_t
                if self.k + 1 >= len(ds.imu_t) and t_target > ds.imu_t[-1]:
                    break
            else:
                break
            if self.cur_t >= t_target - 1e-12:
                break
        return x, p


def run(ds, fcfg, mode="gvio", camera="mono", seed=0, out_dir=None,
        scenario=None):
    """Batch estimation over one dataset.  Returns a RunResult and, when
    out_dir is given, writes estimate.csv / errors.csv / events.csv."""
    if mode not in ("vio", "gvio"):
        raise ValueError(f"unknown mode {mode!r}")
    if not len(ds.imu_t):
        raise DatasetError("empty IMU stream")
    if np.any(np.diff(ds.imu_t) <= 0):
        raise DatasetError("IMU stream not sorted")
    noise_cfg = scenario.noise if scenario is not None else None
    if noise_cfg is None:
        from .config import NoiseConfig
        noise_cfg = NoiseConfig()
    cam_cfg = scenario.camera if scenario is not None else None
    if cam_cfg is None:
        from .config import CameraConfig
        cam_cfg = CameraConfig(stereo=(camera == "stereo"))
    stereo_pose = stereo_extrinsics(cam_cfg) if camera == "stereo" else None
    cam_extr = camera_extrinsics(cam_cfg)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    x, p = build_initial_state(ds, fcfg, cam_extr, rng)
    vis = VisionProcessor(vision_config_from(fcfg, noise_cfg, stereo_pose))
    gnss_mgr = GnssManager(gnss_config_from(fcfg, noise_cfg))
    noise = process_noise_from(noise_cfg)
    prop = _Propagator(ds, noise, fcfg.trapezoidal_qd)

    paired, standalone = _pair_gnss_to_images(ds.frames, ds.gnss,
                                              fcfg.soft_sync_tol)
    events = []
    timeline = [(t, 0, ("image", frame_id,
                        [(fid, cam, np.array([u, v]))
                         for fid, cam, u, v in obs]))
                for t, frame_id, obs in ds.frames]
    if mode == "gvio":
        timeline += [(t, 1, ("gnss", None, obs)) for t, obs in standalone]
    timeline.sort(key=lambda e: (e[0], e[1]))

    align = None
    if mode == "gvio" and fcfg.align_known:
        if getattr(ds, "true_t_w_ecef", None) is None:
            raise DatasetError("align_known requires a simulation dataset "
                               "with its true world->ECEF transform")
        align = Alignment(ds.true_t_w_ecef, frozen=True)
    align_pairs = []
    est_rows = []
    err_rows = []
    image_costs = []

    def log(t, kind, info=""):
        events.append((t, kind, info))

    def handle_gnss_epoch(t, obs_list):
        nonlocal x, p, align
        if align is None or (not align.frozen):
            try:
                sol = spp_solve(obs_list, gnss_mgr.cfg)
            except SppError as exc:
                log(t, "spp_failed", str(exc))
                sol = None
            if sol is not None:
                align_pairs.append((t, x.imu.pos.copy(), sol.position))
                if align is None:
                    log(t, "spp_fix", f"gdop={sol.gdop:.2f}")
            if sol is not None and len(align_pairs) >= gnss_mgr.cfg.align_min_samples:
                vio = np.array([q for _, q, _ in align_pairs])
                fixes = np.array([f for _, _, f in align_pairs])
                got = initialize_alignment(vio, fixes, gnss_mgr.cfg)
                if got is not None:
                    first = align is None
                    got.frozen = not fcfg.align_refine
                    align = got
                    if first:
                        log(t, "alignment_initialized",
                            f"samples={len(align_pairs)}")
        if align is not None:
            diag = {}
            x, p = gnss_mgr.update(x, p, obs_list, align, diag)
            for key in ("clock_added", "clock_removed", "gnss_gated"):
                if diag.get(key):
                    log(t, key, str(diag[key]))
            if diag.get("gnss_rows"):
                log(t, "gnss_update", f"rows={diag['gnss_rows']}")
            if diag.get("all_gated"):
                log(t, "gnss_all_gated")

    for t, _, (kind, frame_id, obs) in timeline:
        x, p = prop.advance(x, p, t)
        if kind == "image":
            t0 = time.perf_counter()
            x, p = augment_clone(x, p, frame_id, t)
            x, p, ev = vis.process_image(x, p, frame_id, obs)
            if ev.get("marginal_pair"):
                log(t, "marginalize", f"pair={ev['marginal_pair']}")
            for key in ("promoted", "gated", "slam_dropped_gate",
                        "slam_dropped_lost", "msckf_rows"):
                if ev.get(key):
                    log(t, key, str(ev[key]))
            if mode == "gvio":
                for tg, gobs in paired.get(frame_id, []):
                    handle_gnss_epoch(tg, gobs)
            image_costs.append(time.perf_counter() - t0)
            if frame_id % 4 == 0:
                _check_health(p)
            _record(est_rows, err_rows, t, x, p, ds)
        else:
            handle_gnss_epoch(t, obs)

    _check_health(p)
    if mode == "gvio" and align is None:
        log(float(ds.imu_t[-1]), "warning", "alignment never achieved; "
            "ran as visual-inertial only")

    result = _build_result(est_rows, err_rows, events, ds, align is not None,
                           image_costs, x, p)
    if out_dir is not None:
        write_run_outputs(result, out_dir)
    return result


def _check_health(p):
    try:
        np.linalg.cholesky(p + np.eye(p.shape[0]) * (1e-12 * max(np.trace(p), 1.0)))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance lost positive definiteness") from exc


def _record(est_rows, err_rows, t, x, p, ds):
    q = rot_to_quat(x.imu.rot)
    diag15 = np.diag(p)[:15]
    est_rows.append((t, x.imu.pos.copy(), q, x.imu.vel.copy(), diag15.copy()))
    if ds.truth is not None:
        i = ds.truth.index_of(t)
        e15 = imu_error_vector(ds.truth.rot[i], ds.truth.pos[i],
                               ds.truth.vel[i], ds.truth.gyro_bias[i],
                               ds.truth.accel_bias[i], x)
        err_rows.append((t, ds.truth.pos[i] - x.imu.pos,
                         yaw_error(ds.truth.rot[i], x.imu.rot),
                         nees(e15, p[:15, :15])))


def _build_result(est_rows, err_rows, events, ds, aligned, image_costs, x, p):
    t = np.array([r[0] for r in est_rows])
    res = RunResult(
        t=t,
        pos=np.array([r[1] for r in est_rows]),
        quat=np.array([r[2] for r in est_rows]),
        vel=np.array([r[3] for r in est_rows]),
        cov_diag=np.array([r[4] for r in est_rows]),
        events=events,
        aligned=aligned,
        mean_image_cost=float(np.mean(image_costs)) if image_costs else 0.0,
        final_state=x, final_cov=p,
    )
    if err_rows:
        res.err_pos = np.array([r[1] for r in err_rows])
        res.err_yaw = np.array([r[2] for r in err_rows])
        res.nees15 = np.array([r[3] for r in err_rows])
        res.summary = summarize(res.err_pos, res.err_yaw, res.nees15)
    return res


def _fmt(v):
    return format(float(v), ".17g")


def write_run_outputs(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "estimate.csv", "w", newline="\n") as fh:
        fh.write("# gvio-run estimate v1\n")
        fh.write("# t_s,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
                 + ",".join(f"var{i}" for i in range(15)) + "\n")
        for i in range(len(result.t)):
            row = ([_fmt(result.t[i])] + [_fmt(v) for v in result.pos[i]]
                   + [_fmt(v) for v in result.quat[i]]
                   + [_fmt(v) for v in result.vel[i]]
                   + [_fmt(v) for v in result.cov_diag[i]])
            fh.write(",".join(row) + "\n")
    if result.err_pos is not None:
        with open(out / "errors.csv", "w", newline="\n") as fh:
            fh.write("# gvio-run errors v1\n")
            fh.write("# t_s,ex,ey,ez,err_norm_m,err_yaw_rad,nees15\n")
            for i in range(len(result.t)):
                e = result.err_pos[i]
                fh.write(",".join(
                    [_fmt(result.t[i]), _fmt(e[0]), _fmt(e[1]), _fmt(e[2]),
                     _fmt(np.linalg.norm(e)), _fmt(result.err_yaw[i]),
                     _fmt(result.nees15[i])]) + "\n")
    with open(out / "events.csv", "w", newline="\n") as fh:
        fh.write("# gvio-run events v1\n")
        fh.write("# t_s,event,info\n")
        for t, kind, info in result.events:
            info = str(info).replace(",", ";")
            fh.write(f"{_fmt(t)},{kind},{info}\n")


@dataclass
class MonteCarloResult:
    runs: int
    anees_t: np.ndarray
    anees: np.ndarray            # mean NEES across runs per timestamp
    overall_anees: float
    rmse: np.ndarray             # per-run position RMSE
    interval: tuple


def montecarlo(scenario, fcfg, runs, base_seed=0, out_dir=None, mode="gvio",
               camera="mono"):
    """Independent seeded repetitions with aggregated ANEES and RMSE."""
    if runs < 2:
        raise ValueError("need at least two runs")
    from .metrics import anees_interval
    seeds = np.random.SeedSequence(base_seed).generate_state(runs)
    nees_all = []
    rmse = []
    t_ref = None
    for i in range(runs):
        cfg_i = ScenarioConfig(**{**scenario.__dict__})
        cfg_i.seed = int(seeds[i])
        ds = simulate_scenario(cfg_i)
        res = run(ds, fcfg, mode=mode, camera=camera, seed=int(seeds[i]),
                  scenario=cfg_i)
        if t_ref is None:
            t_ref = res.t
        nees_all.append(res.nees15)
        rmse.append(res.summary.rmse_pos)
    n_min = min(len(v) for v in nees_all)
    nees_mat = np.array([v[:n_min] for v in nees_all])
    anees_t = t_ref[:n_min]
    anees = nees_mat.mean(axis=0)
    overall = float(nees_mat.mean())
    result = MonteCarloResult(runs=runs, anees_t=anees_t, anees=anees,
                              overall_anees=overall,
                              rmse=np.array(rmse),
                              interval=anees_interval(runs, 15))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lo, hi = result.interval
        with open(out / "mc_anees.csv", "w", newline="\n") as fh:
            fh.write("# gvio-run mc_anees v1\n")
            fh.write("# t_s,anees,lo95,hi95\n")
            for i in range(n_min):
                fh.write(f"{_fmt(anees_t[i])},{_fmt(anees[i])},"
                         f"{_fmt(lo)},{_fmt(hi)}\n")
        with open(out / "mc_summary.csv", "w", newline="\n") as fh:
            fh.write("# gvio-run mc_summary v1\n")
            fh.write("# run,seed,rmse_pos_m,mean_nees\n")
            for i in range(runs):
                fh.write(f"{i},{int(seeds[i])},{_fmt(rmse[i])},"
                         f"{_fmt(nees_mat[i].mean())}\n")
            fh.write(f"aggregate,{base_seed},{_fmt(float(np.mean(rmse)))},"
                     f"{_fmt(overall)}\n")
    return result
