"""Raw GNSS measurement models, SPP, frame alignment, and filter updates.

Pseudo range and range rate to one satellite, with the receiver clock
states kept in meters (c absorbed):

    rho    = || R_we p_w + t_we - p_sat || + (clk - sat_clk) + delay
    rhodot = -n . (R_we v_w - v_sat) + (drift - sat_drift)

n is the unit vector from the receiver to the satellite, recomputed from
the current estimate at every epoch and held fixed within one update, so
the Jacobian rows below are the exact gradients of the predictions:

    d rho    = n^T R_we (p_w)^ dth - n^T R_we dp + d clk
    d rhodot = n^T R_we (v_w)^ dth - n^T R_we dv + d drift

Single differences between two satellites of one constellation cancel the
receiver clock terms exactly and absorb the broadcast terms; they are the
clock-free measurement form used by the symmetry analysis and tests; the
filter path fuses raw (undifferenced) measurements with explicit clock
states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GvioError
from .geometry import Pose, ecef_to_geodetic, enu_rotation, skew
from .state import CONSTELLATIONS, delayed_init, kalman_update, marginalize
from .vision import chi2_threshold


@dataclass
class SatelliteObservation:
    constellation: str
    sat_id: int
    sat_pos: np.ndarray       # ECEF, m
    sat_vel: np.ndarray       # ECEF, m/s
    pseudorange: float        # m
    range_rate: float         # m/s
    sat_clock_bias: float     # broadcast, m
    sat_clock_drift: float    # broadcast, m/s
    delay: float              # modeled propagation delay, m

    def __post_init__(self):
        r = float(np.linalg.norm(self.sat_pos))
        if not 2e7 <= r <= 5e7:
            raise ValueError(f"satellite radius {r:.3e} outside orbit sanity")
        if self.pseudorange <= 0.0:
            raise ValueError("non-positive pseudorange")


@dataclass
class Alignment:
    """World-to-ECEF transform fixed by the initializer."""

    t_w_ecef: Pose
    frozen: bool = True


@dataclass
class GnssConfig:
    pr_sigma: float = 1.0            # m
    rr_sigma: float = 0.1            # m/s
    elevation_mask_deg: float = 10.0
    chi2_confidence: float = 0.95
    clock_bias_prior_var: float = 900.0   # m^2
    clock_drift_prior_var: float = 9.0    # (m/s)^2
    align_min_samples: int = 10
    align_min_span: float = 5.0      # m of horizontal motion
    max_gdop: float = 20.0
    spp_max_iter: int = 20
    spp_step_tol: float = 1e-4       # m


class SppError(GvioError):
    """Single point positioning failed for this epoch."""


def receiver_to_sat_unit(p_recv_ecef, sat_pos):
    d = np.asarray(sat_pos, dtype=float) - p_recv_ecef
    return d / np.linalg.norm(d)


def predict_pseudorange(x, align, obs, n_fixed=None):
    """Predicted pseudo range; requires the constellation's clock state."""
    if obs.constellation not in x.clock_biases:
        raise KeyError(f"no clock state for {obs.constellation}")
    p_ecef = align.t_w_ecef.apply(x.imu.pos)
    rng = float(np.linalg.norm(p_ecef - obs.sat_pos))
    return rng + x.clock_biases[obs.constellation] - obs.sat_clock_bias + obs.delay


def predict_doppler(x, align, obs, n_fixed=None):
    """Predicted range rate with n from the current estimate (or frozen)."""
    if obs.constellation not in x.clock_biases:
        raise KeyError(f"no clock state for {obs.constellation}")
    p_ecef = align.t_w_ecef.apply(x.imu.pos)
    n = receiver_to_sat_unit(p_ecef, obs.sat_pos) if n_fixed is None else n_fixed
    v_ecef = align.t_w_ecef.rot @ x.imu.vel
    return (-float(n @ (v_ecef - obs.sat_vel))
            + x.clock_drift - obs.sat_clock_drift)


def single_difference(obs_k, obs_l):
    """Measured between-satellite differences with broadcast terms absorbed.

    Receiver clock terms cancel exactly (bitwise for a common added
    offset); the result depends only on geometry and noise.
    """
    if obs_k.constellation != obs_l.constellation:
        raise ValueError("single difference across constellations")
    pr = ((obs_k.pseudorange + obs_k.sat_clock_bias - obs_k.delay)
          - (obs_l.pseudorange + obs_l.sat_clock_bias - obs_l.delay))
    rr = ((obs_k.range_rate + obs_k.sat_clock_drift)
          - (obs_l.range_rate + obs_l.sat_clock_drift))
    return pr, rr


def predict_single_difference(p_w, v_w, align, obs_k, obs_l):
    """Clock-free predicted differences from geometry alone."""
    if obs_k.constellation != obs_l.constellation:
        raise ValueError("single difference across constellations")
    p_ecef = align.t_w_ecef.apply(np.asarray(p_w, dtype=float))
    v_ecef = align.t_w_ecef.rot @ np.asarray(v_w, dtype=float)
    rng_k = float(np.linalg.norm(p_ecef - obs_k.sat_pos))
    rng_l = float(np.linalg.norm(p_ecef - obs_l.sat_pos))
    n_k = receiver_to_sat_unit(p_ecef, obs_k.sat_pos)
    n_l = receiver_to_sat_unit(p_ecef, obs_l.sat_pos)
    pr = rng_k - rng_l
    rr = (-float(n_k @ (v_ecef - obs_k.sat_vel))
          + float(n_l @ (v_ecef - obs_l.sat_vel)))
    return pr, rr


def gnss_jacobians(x, lay, align, obs, n_fixed=None):
    """Rows (2 x dim) for one satellite: pseudo range then range rate."""
    if not lay.has(("clk", obs.constellation)):
        raise KeyError(f"no clock state for {obs.constellation}")
    r_we = align.t_w_ecef.rot
    p_ecef = align.t_w_ecef.apply(x.imu.pos)
    n = receiver_to_sat_unit(p_ecef, obs.sat_pos) if n_fixed is None else n_fixed
    nr = n @ r_we
    h = np.zeros((2, lay.dim))
    h[0, lay.slice(("att",))] = nr @ skew(x.imu.pos)
    h[0, lay.slice(("pos",))] = -nr
    h[0, lay.slice(("clk", obs.constellation))] = 1.0
    h[1, lay.slice(("att",))] = nr @ skew(x.imu.vel)
    h[1, lay.slice(("vel",))] = -nr
    h[1, lay.slice(("drift",))] = 1.0
    return h


def single_difference_jacobians(x, lay, align, obs_k, obs_l,
                                n_k=None, n_l=None):
    """Rows (2 x dim) of the clock-free differenced measurements.

    No clock columns appear; these rows feed the symmetry/observability
    analysis, not the filter.
    """
    r_we = align.t_w_ecef.rot
    p_ecef = align.t_w_ecef.apply(x.imu.pos)
    if n_k is None:
        n_k = receiver_to_sat_unit(p_ecef, obs_k.sat_pos)
    if n_l is None:
        n_l = receiver_to_sat_unit(p_ecef, obs_l.sat_pos)
    dn = (n_k - n_l) @ r_we
    h = np.zeros((2, lay.dim))
    h[0, lay.slice(("att",))] = dn @ skew(x.imu.pos)
    h[0, lay.slice(("pos",))] = -dn
    h[1, lay.slice(("att",))] = dn @ skew(x.imu.vel)
    h[1, lay.slice(("vel",))] = -dn
    return h


@dataclass
class SppSolution:
    position: np.ndarray              # ECEF
    clock_biases: dict                # constellation -> m
    velocity: np.ndarray              # ECEF
    clock_drift: float                # m/s
    gdop: float


def spp_solve(observations, cfg=None):
    """Epoch-wise least squares: Gauss-Newton on pseudo ranges for position
    and per-constellation clock biases, then linear least squares on range
    rates for velocity and a common drift.  Raises SppError on too few
    satellites, weak geometry (GDOP), or divergence."""
    cfg = cfg or GnssConfig()
    consts = [c for c in CONSTELLATIONS
              if any(o.constellation == c for o in observations)]
    n_obs = len(observations)
    if n_obs < 3 + len(consts) or n_obs < 4:
        raise SppError(f"{n_obs} satellites cannot solve "
                       f"position + {len(consts)} clocks")
    col = {c: 3 + i for i, c in enumerate(consts)}
    pos = np.zeros(3)
    clocks = np.zeros(len(consts))
    geom = None
    converged = False
    for _ in range(cfg.spp_max_iter):
        a = np.zeros((n_obs, 3 + len(consts)))
        b = np.zeros(n_obs)
        for i, o in enumerate(observations):
            d = pos - o.sat_pos
            rng = np.linalg.norm(d)
            if rng < 1.0:
                rng = 1.0
            u = d / rng
            a[i, 0:3] = u
            a[i, col[o.constellation]] = 1.0
            pred = rng + clocks[col[o.constellation] - 3] \
                - o.sat_clock_bias + o.delay
            b[i] = o.pseudorange - pred
        try:
            step, *_ = np.linalg.lstsq(a, b, rcond=None)
        except np.linalg.LinAlgError as exc:
            raise SppError("normal equations singular") from exc
        pos = pos + step[0:3]
        clocks = clocks + step[3:]
        geom = a
        if np.linalg.norm(step) < cfg.spp_step_tol:
            converged = True
            break
    if not converged:
        raise SppError("Gauss-Newton did not converge")
    gtg = geom.T @ geom
    svals = np.linalg.svd(gtg, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise SppError("degenerate geometry")
    gdop = math.sqrt(float(np.trace(np.linalg.inv(gtg))))
    if gdop > cfg.max_gdop:
        raise SppError(f"GDOP {gdop:.1f} too weak")

    # velocity + shared drift from range rates (linear)
    a_v = np.zeros((n_obs, 4))
    b_v = np.zeros(n_obs)
    for i, o in enumerate(observations):
        n = receiver_to_sat_unit(pos, o.sat_pos)
        a_v[i, 0:3] = -n
        a_v[i, 3] = 1.0
        b_v[i] = o.range_rate - float(n @ o.sat_vel) + o.sat_clock_drift
    sol, *_ = np.linalg.lstsq(a_v, b_v, rcond=None)
    return SppSolution(position=pos,
                       clock_biases={c: float(clocks[col[c] - 3]) for c in consts},
                       velocity=sol[0:3], clock_drift=float(sol[3]),
                       gdop=gdop)


def initialize_alignment(vio_positions, spp_positions, cfg=None):
    """4-DoF (yaw + translation) fit of the odometry frame to ECEF.

    ENU origin is the first fix; yaw comes from closed-form 2-D Procrustes
    on the horizontal components.  Returns None (deferred) while the
    horizontal motion span is too small for the yaw to be observable.
    """
    cfg = cfg or GnssConfig()
    vio = np.asarray(vio_positions, dtype=float)
    fixes = np.asarray(spp_positions, dtype=float)
    if len(vio) < cfg.align_min_samples:
        return None
    origin = fixes[0]
    r_eo = enu_rotation(ecef_to_geodetic(origin))
    enu = (fixes - origin) @ r_eo  # row-vector form of R^T (p - o)

    horiz = vio[:, :2]
    span = np.linalg.norm(horiz - horiz[0], axis=1).max()
    if span < cfg.align_min_span:
        return None

    a = horiz - horiz.mean(axis=0)
    b = enu[:, :2] - enu[:, :2].mean(axis=0)
    cross = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    dot = float(np.sum(a * b))
    yaw = math.atan2(cross, dot)
    cz, sz = math.cos(yaw), math.sin(yaw)
    r_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    t = enu.mean(axis=0) - r_z @ vio.mean(axis=0)
    rot = r_eo @ r_z
    trans = r_eo @ t + origin
    return Alignment(Pose(rot, trans))


def elevation_angle(p_recv_ecef, n):
    """Elevation of the direction n above the local horizon at the receiver."""
    up = enu_rotation(ecef_to_geodetic(p_recv_ecef))[:, 2]
    return math.asin(min(1.0, max(-1.0, float(n @ up))))


@dataclass
class GnssManager:
    """Clock-state lifecycle plus the per-epoch stacked update."""

    cfg: GnssConfig = field(default_factory=GnssConfig)

    def update(self, x, p, observations, align, diag=None):
        diag = diag if diag is not None else {}
        cfg = self.cfg
        present = {o.constellation for o in observations}

        # stale constellations leave the state
        stale = [c for c in list(x.clock_biases) if c not in present]
        for c in stale:
            x, p = marginalize(x, p, [("clk", c)])
            diag["clock_removed"] = diag.get("clock_removed", 0) + 1

        new = [c for c in CONSTELLATIONS
               if c in present and c not in x.clock_biases]
        if new:
            try:
                spp = spp_solve(observations, cfg)
            except SppError as exc:
                diag["spp_failed"] = str(exc)
                spp = None
            if spp is not None:
                for c in new:
                    if c not in spp.clock_biases:
                        continue
                    x, p = self._init_clock(x, p, c, spp)
                    diag["clock_added"] = diag.get("clock_added", 0) + 1

        usable = [o for o in observations if o.constellation in x.clock_biases]
        if not usable:
            diag["no_usable_rows"] = True
            return x, p

        lay = x.layout()
        p_ecef = align.t_w_ecef.apply(x.imu.pos)
        up = enu_rotation(ecef_to_geodetic(p_ecef))[:, 2]
        mask = math.radians(cfg.elevation_mask_deg)
        rows, res_all, var_all = [], [], []
        for o in usable:
            n = receiver_to_sat_unit(p_ecef, o.sat_pos)
            el = math.asin(min(1.0, max(-1.0, float(n @ up))))
            w = 1.0 / math.sin(max(el, mask)) ** 2
            h = gnss_jacobians(x, lay, align, o, n_fixed=n)
            res = np.array([
                o.pseudorange - predict_pseudorange(x, align, o),
                o.range_rate - predict_doppler(x, align, o, n_fixed=n),
            ])
            rows.append(h)
            res_all.append(res)
            var_all.append(np.array([cfg.pr_sigma ** 2 * w,
                                     cfg.rr_sigma ** 2 * w]))
        hp = np.vstack(rows) @ p
        h_all, r_all, v_all = [], [], []
        for i, (h, res, var) in enumerate(zip(rows, res_all, var_all)):
            s = hp[2 * i:2 * i + 2] @ h.T + np.diag(var)
            gate = float(res @ np.linalg.solve(s, res))
            if gate > chi2_threshold(cfg.chi2_confidence, 2):
                diag["gnss_gated"] = diag.get("gnss_gated", 0) + 1
                continue
            h_all.append(h)
            r_all.append(res)
            v_all.append(var)
        if not h_all:
            diag["all_gated"] = True
            return x, p
        h = np.vstack(h_all)
        r = np.concatenate(r_all)
        rn = np.diag(np.concatenate(v_all))
        x, p = kalman_update(x, p, h, r, rn)
        diag["gnss_rows"] = h.shape[0]
        return x, p

    def _init_clock(self, x, p, const, spp):
        cfg = self.cfg
        if not x.clock_biases:
            values = np.array([spp.clock_biases[const], spp.clock_drift])
            prior = np.diag([cfg.clock_bias_prior_var,
                             cfg.clock_drift_prior_var])
            return delayed_init(x, p, ("clk_and_drift", const), values,
                                None, np.eye(2), np.zeros(2), prior)
        return delayed_init(x, p, ("clk", const), spp.clock_biases[const],
                            None, np.eye(1), np.zeros(1),
                            np.array([[cfg.clock_bias_prior_var]]))
