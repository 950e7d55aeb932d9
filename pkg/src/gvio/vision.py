"""Visual front-end bookkeeping, triangulation, and camera updates.

Features live in two populations.  Short tracks are consumed by
nullspace-projected stacked updates without ever entering the state
("msckf" features); long tracks get promoted into the state as anchored
landmarks and updated directly ("slam" features).  Cloned poses are not
managed as a sliding window: once the clone count exceeds the configured
maximum, two clones are retired on every other image - the second-newest
plus the interior clone whose removal keeps the retained timeline most
even - which stretches the oldest-to-newest baseline far beyond an
oldest-first window of equal size.

Jacobians of a camera-frame point w.r.t. the invariant error coordinates:

    d(p_cam)/d(dth_clone) = -d(p_cam)/d(dth_anchor) = R_clone^T (p_f_w)^
    d(p_cam)/d(dp_clone)  = -d(p_cam)/d(dp_f)       = -R_clone^T

The anchor rotation slot enters because the landmark error borrows the
anchor clone's rotation perturbation; when a feature is observed from its
own anchor the two rotation terms cancel exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from ._kernels import (
    feature_row_math,
    null_project,
    reprojection_mean,
    tri_gauss_newton,
)
from .errors import InitializationRejected
from .geometry import Pose, skew
from .state import (
    Landmark,
    boxplus,
    delayed_init,
    kalman_update,
    marginalize,
)


@dataclass
class Observation:
    frame_id: int
    cam: int          # 0 left, 1 right
    uv: np.ndarray    # normalized image coordinates


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)

    def frames(self):
        return sorted({o.frame_id for o in self.observations})


@dataclass
class KeyframePolicyState:
    """Image parity counter plus the preset max clone count."""

    n_max: int
    image_count: int = 0


@dataclass
class VisionConfig:
    n_max: int = 20
    m_max: int = 12
    promote_span: int = 20            # track span (frames) before promotion
    chi2_confidence: float = 0.95
    meas_sigma: float = 1.0 / 460.0   # pixel sigma / focal length
    depth_min: float = 0.2
    depth_max: float = 300.0
    reproj_gate_mult: float = 3.0     # accept mean residual < mult * sigma
    slam_fail_limit: int = 3
    depth_eps: float = 1e-6
    tri_max_iter: int = 10
    tri_max_obs: int = 12         # evenly strided subset for triangulation
    tri_min_parallax: float = 0.015   # min camera-center spread / depth
    stereo: Pose = None               # right-from-left transform, or None


@lru_cache(maxsize=256)
def chi2_threshold(confidence, dof):
    return float(chi2.ppf(confidence, dof))


def project(p_cam, depth_eps=1e-6):
    """Pinhole projection (x, y, z) -> (x/z, y/z); invalid at z <= eps."""
    p_cam = np.asarray(p_cam, dtype=float)
    if p_cam[2] <= depth_eps:
        raise ValueError("non-positive depth")
    return p_cam[:2] / p_cam[2]


def project_jacobian(p_cam):
    x, y, z = p_cam
    return np.array([[1.0 / z, 0.0, -x / (z * z)],
                     [0.0, 1.0 / z, -y / (z * z)]])


def _camera_pose(clone_pose, cam, stereo):
    """World pose of the observing physical camera (clones store the left)."""
    if cam == 0:
        return clone_pose
    return clone_pose.compose(stereo.inverse())


def predict_feature_obs(x, p_f_w, frame_id, cam, stereo, depth_eps=1e-6):
    """Predicted normalized coordinates of a world point in a clone's camera."""
    cam_pose = _camera_pose(x.clones[frame_id], cam, stereo)
    p_cam = cam_pose.rot.T @ (p_f_w - cam_pose.trans)
    return project(p_cam, depth_eps)


def visual_jacobians(x, lay, p_f_w, frame_id, cam, anchor_frame, uv, cfg):
    """One observation's rows: (h_x, h_feat, residual), or None when the
    predicted depth is non-positive.

    h_x covers the state columns (clone, anchor), h_feat the 2x3 block for
    the feature position error; for in-state landmarks the caller scatters
    h_feat into the landmark columns.
    """
    clone = x.clones[frame_id]
    p_left = clone.rot.T @ (p_f_w - clone.trans)
    if cam == 0:
        p_cam = p_left
        chain = clone.rot.T
    else:
        p_cam = cfg.stereo.apply(p_left)
        chain = cfg.stereo.rot @ clone.rot.T
    if p_cam[2] <= cfg.depth_eps:
        return None
    dpi = project_jacobian(p_cam)
    front = dpi @ chain  # 2x3, includes the left-to-right chain when cam=1
    h_x = np.zeros((2, lay.dim))
    rot_block = front @ skew(p_f_w)
    if anchor_frame != frame_id:
        h_x[:, lay.slice(("clone_att", frame_id))] = rot_block
        h_x[:, lay.slice(("clone_att", anchor_frame))] = -rot_block
    h_x[:, lay.slice(("clone_pos", frame_id))] = -front
    h_feat = front.copy()
    residual = np.asarray(uv, dtype=float) - p_cam[:2] / p_cam[2]
    return h_x, h_feat, residual


def triangulate(track, clones, cfg, init_point=None):
    """World point from a multi-view track: linear initialization (or a
    warm start) plus Gauss-Newton over inverse depth in the first
    observing camera.

    Returns (point, None) or (None, reason).  Acceptance requires depth
    within bounds in the anchor camera, mean reprojection residual below
    the gate, and convergence within the iteration budget.
    """
    obs = [o for o in track.observations if o.frame_id in clones]
    if cfg.stereo is None:
        obs = [o for o in obs if o.cam == 0]
    if len(obs) < 2:
        return None, "too-few-obs"
    if len(obs) > cfg.tri_max_obs:
        stride = np.linspace(0, len(obs) - 1, cfg.tri_max_obs).round().astype(int)
        obs = [obs[i] for i in dict.fromkeys(stride)]
    poses = [_camera_pose(clones[o.frame_id], o.cam, cfg.stereo) for o in obs]
    rot_wc = np.array([cp.rot for cp in poses])    # (n, 3, 3) camera->world
    centers = np.array([cp.trans for cp in poses])
    uv = np.array([o.uv for o in obs])
    n_obs = len(obs)
    spread = np.linalg.norm(centers - centers[0], axis=1).max()
    if spread < 1e-9:
        return None, "parallax"

    if init_point is None:
        # DLT rows: (u r3 - r1) p = (u r3 - r1) c  per coordinate
        rt = rot_wc.transpose(0, 2, 1)          # world->camera rows
        rows = np.concatenate([uv[:, 0:1] * rt[:, 2] - rt[:, 0],
                               uv[:, 1:2] * rt[:, 2] - rt[:, 1]])
        rhs = np.einsum("ni,ni->n", rows,
                        np.concatenate([centers, centers]))
        sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    else:
        sol = np.asarray(init_point, dtype=float)

    ref_rot, ref_trans = rot_wc[0], centers[0]
    p_ref = ref_rot.T @ (sol - ref_trans)
    if p_ref[2] <= cfg.depth_eps:
        return None, "depth"
    q = np.array([p_ref[0] / p_ref[2], p_ref[1] / p_ref[2], 1.0 / p_ref[2]])

    rot_wc = np.ascontiguousarray(rot_wc)
    centers = np.ascontiguousarray(centers)
    uv = np.ascontiguousarray(uv)
    q, status = tri_gauss_newton(rot_wc, centers, uv, q,
                                 cfg.tri_max_iter, cfg.depth_eps)
    if status == 1:
        return None, "depth"
    if status == 2:
        return None, "degenerate"
    if status == 3:
        return None, "diverged"

    depth = 1.0 / q[2]
    if not (cfg.depth_min <= depth <= cfg.depth_max):
        return None, "depth"
    if spread < cfg.tri_min_parallax * depth:
        return None, "parallax"
    p_w = ref_rot @ (np.array([q[0], q[1], 1.0]) * depth) + ref_trans
    mean_res, ok = reprojection_mean(rot_wc, centers, uv, p_w, cfg.depth_eps)
    if not ok:
        return None, "depth"
    if mean_res > cfg.reproj_gate_mult * cfg.meas_sigma:
        return None, "reprojection"
    return p_w, None


def feature_rows(x, lay, p_f_w, obs_list, anchor_frame, cfg):
    """Stacked rows for one feature over several observations.

    Returns (h_x (2n x dim), h_f (2n x 3), residual (2n,)) or None when no
    observation has positive predicted depth.  The per-observation camera
    math runs in a compiled kernel; this assembles the layout columns.
    """
    n = len(obs_list)
    if n == 0:
        return None
    rot = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    cams = np.empty(n, dtype=np.int8)
    uv = np.empty((n, 2))
    for i, o in enumerate(obs_list):
        clone = x.clones[o.frame_id]
        rot[i] = clone.rot
        trans[i] = clone.trans
        cams[i] = o.cam
        uv[i] = o.uv
    if cfg.stereo is not None:
        srot, strans = cfg.stereo.rot, cfg.stereo.trans
    else:
        srot, strans = np.eye(3), np.zeros(3)
    front, rot_block, res2, ok = feature_row_math(
        rot, trans, cams, srot, strans,
        np.ascontiguousarray(p_f_w, dtype=float), uv, cfg.depth_eps)
    if not ok.any():
        return None
    kept = [i for i in range(n) if ok[i]]
    m = len(kept)
    h_x = np.zeros((2 * m, lay.dim))
    h_f = np.empty((2 * m, 3))
    res = np.empty(2 * m)
    anchor_sl = lay.slice(("clone_att", anchor_frame))
    for out_i, i in enumerate(kept):
        rows = slice(2 * out_i, 2 * out_i + 2)
        frame = obs_list[i].frame_id
        if frame != anchor_frame:
            h_x[rows, lay.slice(("clone_att", frame))] = rot_block[i]
            h_x[rows, anchor_sl] -= rot_block[i]
        h_x[rows, lay.slice(("clone_pos", frame))] = -front[i]
        h_f[rows] = front[i]
        res[rows] = res2[i]
    return h_x, h_f, res


def build_msckf_system(x, lay, track, p_f_w, anchor_frame, cfg,
                       use_frames=None):
    """Stacked, nullspace-projected rows for one out-of-state feature.

    Returns (h, r) with the feature-position directions removed (3 dof), or
    None when fewer than one effective row remains.
    """
    obs = [o for o in track.observations if o.frame_id in x.clones]
    if use_frames is not None:
        obs = [o for o in obs if o.frame_id in use_frames]
    if cfg.stereo is None:
        obs = [o for o in obs if o.cam == 0]
    out = feature_rows(x, lay, p_f_w, obs, anchor_frame, cfg)
    if out is None:
        return None
    h_x, h_f, r = out
    if h_x.shape[0] <= 3:
        return None
    return null_project(h_f, h_x, r)


def msckf_update(x, p, tracks, cfg, use_frames=None, diag=None):
    """Triangulate, project, gate and stack features, then one update.

    use_frames restricts the *rows* to observations at the given frames
    (marginalization-driven updates); triangulation always uses the full
    in-state track.
    """
    diag = diag if diag is not None else {}
    lay = x.layout()
    h_all, r_all = [], []
    for track in tracks:
        # cheap pre-check: at least one effective row must survive the
        # 3-dof projection before any triangulation work is spent
        n_rows = 2 * sum(1 for o in track.observations
                         if o.frame_id in x.clones
                         and (use_frames is None or o.frame_id in use_frames)
                         and (o.cam == 0 or cfg.stereo is not None))
        if n_rows <= 3:
            diag["thin"] = diag.get("thin", 0) + 1
            continue
        warm = getattr(track, "last_point", None)
        p_f, why = triangulate(track, x.clones, cfg, init_point=warm)
        if p_f is None:
            diag[f"tri-{why}"] = diag.get(f"tri-{why}", 0) + 1
            continue
        if hasattr(track, "last_point"):
            track.last_point = p_f
        anchor = _pick_anchor(track, x)
        if anchor is None:
            diag["no-anchor"] = diag.get("no-anchor", 0) + 1
            continue
        sys_ = build_msckf_system(x, lay, track, p_f, anchor, cfg, use_frames)
        if sys_ is None:
            diag["thin"] = diag.get("thin", 0) + 1
            continue
        h_all.append(sys_[0])
        r_all.append(sys_[1])
    if not h_all:
        return x, p
    # one stacked H P product serves every per-feature gate
    h_cat = np.vstack(h_all)
    hp = h_cat @ p
    sigma2 = cfg.meas_sigma ** 2
    keep_h, keep_r = [], []
    row0 = 0
    for h, r in zip(h_all, r_all):
        rows = h.shape[0]
        s = hp[row0:row0 + rows] @ h.T + sigma2 * np.eye(rows)
        row0 += rows
        gate = float(r @ np.linalg.solve(s, r))
        if gate > chi2_threshold(cfg.chi2_confidence, rows):
            diag["gated"] = diag.get("gated", 0) + 1
            continue
        keep_h.append(h)
        keep_r.append(r)
    if not keep_h:
        return x, p
    h = np.vstack(keep_h)
    r = np.concatenate(keep_r)
    if h.shape[0] > lay.dim:
        q, rr = np.linalg.qr(h)
        h, r = rr, q.T @ r
    diag["msckf_rows"] = diag.get("msckf_rows", 0) + h.shape[0]
    return kalman_update(x, p, h, r, cfg.meas_sigma ** 2 * np.eye(h.shape[0]))


def _pick_anchor(track, x):
    """Bookkept anchor if still in state, else earliest in-state clone."""
    anchor = getattr(track, "anchor_frame", None)
    if anchor in x.clones:
        return anchor
    for fid in x.clones:
        return fid
    return None


def slam_update(x, p, observations, cfg, diag=None):
    """Direct update of in-state landmarks, per-landmark chi-square gate.

    observations: list of (feature_id, cam, uv) for the current frame
    (frame must be the newest clone).  Returns (x, p, gated_ids).
    """
    diag = diag if diag is not None else {}
    lay = x.layout()
    frame_id = next(reversed(x.clones)) if x.clones else None
    per_lm = {}
    for fid, cam, uv in observations:
        if fid not in x.landmarks or (cam == 1 and cfg.stereo is None):
            continue
        per_lm.setdefault(fid, []).append(Observation(frame_id, cam, uv))
    rows, ids = [], []
    gated = []
    for fid, obs in per_lm.items():
        lm = x.landmarks[fid]
        out = feature_rows(x, lay, lm.position, obs, lm.anchor_frame, cfg)
        if out is None:
            diag["slam-depth"] = diag.get("slam-depth", 0) + 1
            continue
        h_x, h_feat, res = out
        h_x[:, lay.slice(("lm", fid))] = h_feat
        rows.append((h_x, res))
        ids.append(fid)
    if not rows:
        return x, p, gated
    hp = np.vstack([h for h, _ in rows]) @ p
    sigma2 = cfg.meas_sigma ** 2
    keep_h, keep_r = [], []
    row0 = 0
    for i, (h, res) in enumerate(rows):
        nr = h.shape[0]
        s = hp[row0:row0 + nr] @ h.T + sigma2 * np.eye(nr)
        row0 += nr
        gate = float(res @ np.linalg.solve(s, res))
        if gate > chi2_threshold(cfg.chi2_confidence, nr):
            gated.append(ids[i])
            diag["slam-gated"] = diag.get("slam-gated", 0) + 1
            continue
        keep_h.append(h)
        keep_r.append(res)
    if not keep_h:
        return x, p, gated
    h = np.vstack(keep_h)
    r = np.concatenate(keep_r)
    x, p = kalman_update(x, p, h, r, sigma2 * np.eye(h.shape[0]))
    return x, p, gated


def select_marginal_poses(policy, clones, clone_times):
    """Pick the pair of clones to retire, or None.

    Triggers only on every other image and only above the clone budget.
    The pair is the second-newest clone plus the interior clone (neither
    oldest nor newest) whose removal minimizes the resulting largest
    temporal gap; ties break toward the lower frame id.  The newest clone
    is never returned.
    """
    policy.image_count += 1
    if policy.image_count % 2 != 0:
        return None
    fids = list(clones)
    if len(fids) <= policy.n_max or len(fids) < 4:
        return None
    second_newest = fids[-2]
    candidates = fids[1:-2]
    best, best_gap = None, math.inf
    for cand in candidates:
        kept = [clone_times[f] for f in fids
                if f not in (cand, second_newest)]
        gap = max(b - a for a, b in zip(kept, kept[1:]))
        if gap < best_gap - 1e-12:
            best, best_gap = cand, gap
    return best, second_newest


def anchor_change_jacobian(x, feature_ids, new_anchor):
    """J mapping old error coordinates to coordinates anchored elsewhere.

    Only landmark rows differ from identity:
        dp_new = dp_old - (p_f)^ dth_old_anchor + (p_f)^ dth_new_anchor
    """
    lay = x.layout()
    jac = np.eye(lay.dim)
    for fid in feature_ids:
        lm = x.landmarks[fid]
        if lm.anchor_frame == new_anchor:
            continue
        s = skew(lm.position)
        jac[lay.slice(("lm", fid)), lay.slice(("clone_att", lm.anchor_frame))] = -s
        jac[lay.slice(("lm", fid)), lay.slice(("clone_att", new_anchor))] = s
    return jac


def change_anchor(x, p, feature_ids, new_anchor):
    """Re-anchor in-state landmarks; values unchanged, P <- J P J^T."""
    if new_anchor not in x.clones:
        raise ValueError(f"new anchor {new_anchor} not in state")
    lay = x.layout()
    out = x.copy()
    p_new = p.copy()
    affected = [fid for fid in feature_ids
                if out.landmarks[fid].anchor_frame != new_anchor]
    # row sweep from the original matrix, then the mirrored column sweep
    for fid in affected:
        lm = out.landmarks[fid]
        s = skew(lm.position)
        sl = lay.slice(("lm", fid))
        old_att = lay.slice(("clone_att", lm.anchor_frame))
        new_att = lay.slice(("clone_att", new_anchor))
        p_new[sl, :] = p[sl, :] - s @ p[old_att, :] + s @ p[new_att, :]
    half = p_new.copy()
    for fid in affected:
        lm = out.landmarks[fid]
        s = skew(lm.position)
        sl = lay.slice(("lm", fid))
        old_att = lay.slice(("clone_att", lm.anchor_frame))
        new_att = lay.slice(("clone_att", new_anchor))
        p_new[:, sl] = half[:, sl] - half[:, old_att] @ s.T + half[:, new_att] @ s.T
        lm.anchor_frame = new_anchor
    return out, 0.5 * (p_new + p_new.T)


@dataclass
class TrackedFeature(FeatureTrack):
    anchor_frame: int = -1
    first_frame: int = -1
    last_frame: int = -1
    is_slam: bool = False
    slam_fail: int = 0
    last_point: np.ndarray = None   # warm start for re-triangulation


class VisionProcessor:
    """Per-image pipeline: bookkeeping, updates, marginalization, anchors.

    Order per image (the clone for the image is augmented by the caller):
    mark new features, update and drop lost tracks, select the retirement
    pair, update features touching those poses, run landmark updates and
    promotions, change anchors, remove the pair.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.tracks = {}
        self.policy = KeyframePolicyState(n_max=cfg.n_max)

    def process_image(self, x, p, frame_id, observations):
        cfg = self.cfg
        events = {}

        # (2) ingest: every new feature starts as an msckf-type track
        seen = set()
        for fid, cam, uv in observations:
            if cam == 1 and cfg.stereo is None:
                continue
            seen.add(fid)
            track = self.tracks.get(fid)
            if track is None:
                track = TrackedFeature(feature_id=fid, anchor_frame=frame_id,
                                       first_frame=frame_id)
                self.tracks[fid] = track
            track.last_frame = frame_id
            if not track.is_slam:
                track.observations.append(
                    Observation(frame_id, cam, np.asarray(uv, dtype=float)))

        # (3) lost tracks: msckf features get their final update; lost
        # landmarks leave the state (their information lives in P)
        lost = [t for t in self.tracks.values() if t.last_frame != frame_id]
        lost_msckf = [t for t in lost if not t.is_slam and t.observations]
        if lost_msckf:
            x, p = msckf_update(x, p, lost_msckf, cfg, diag=events)
            events["msckf_lost"] = len(lost_msckf)
        for t in lost:
            if t.is_slam and t.feature_id in x.landmarks:
                x, p = marginalize(x, p, [("lm", t.feature_id)])
                events["slam_dropped_lost"] = events.get("slam_dropped_lost", 0) + 1
            del self.tracks[t.feature_id]

        # (4) select two poses for marginalization, if possible
        pair = select_marginal_poses(self.policy, x.clones, x.clone_times)

        # (5) msckf updates for features involved in the selected poses,
        # rows restricted to those poses; observations there are consumed
        if pair is not None:
            events["marginal_pair"] = pair
            involved = [t for t in self.tracks.values()
                        if not t.is_slam
                        and any(o.frame_id in pair for o in t.observations)]
            if involved:
                x, p = msckf_update(x, p, involved, cfg, use_frames=pair,
                                    diag=events)
                events["msckf_marg"] = len(involved)
            for t in involved:
                t.observations = [o for o in t.observations
                                  if o.frame_id not in pair]

        # (6) landmark updates, then promotion of long tracks
        slam_obs = [(fid, cam, uv) for fid, cam, uv in observations
                    if fid in x.landmarks]
        if slam_obs:
            x, p, gated = slam_update(x, p, slam_obs, cfg, diag=events)
            hit = {fid for fid, _, _ in slam_obs}
            for fid in hit:
                t = self.tracks.get(fid)
                if t is None:
                    continue
                if fid in gated:
                    t.slam_fail += 1
                else:
                    t.slam_fail = 0
            for fid in list(hit):
                t = self.tracks.get(fid)
                if t is not None and t.slam_fail >= cfg.slam_fail_limit:
                    x, p = marginalize(x, p, [("lm", fid)])
                    del self.tracks[fid]
                    events["slam_dropped_gate"] = events.get(
                        "slam_dropped_gate", 0) + 1
        x, p = self._promote(x, p, frame_id, seen, events)

        # (7) anchors of features tied to the pair move to the newest clone
        if pair is not None:
            slam_move = [fid for fid, lm in x.landmarks.items()
                         if lm.anchor_frame in pair]
            if slam_move:
                x, p = change_anchor(x, p, slam_move, frame_id)
                events["anchor_changed"] = len(slam_move)
            for t in self.tracks.values():
                if t.anchor_frame in pair:
                    t.anchor_frame = frame_id
                t.observations = [o for o in t.observations
                                  if o.frame_id not in pair]

            # (8) remove the two selected poses
            x, p = marginalize(x, p, [("clone", pair[0]), ("clone", pair[1])])

        for lm in x.landmarks.values():
            assert lm.anchor_frame in x.clones
        assert len(x.clones) <= cfg.n_max + 1
        return x, p, events

    def _promote(self, x, p, frame_id, seen, events):
        cfg = self.cfg
        for fid in sorted(seen):
            track = self.tracks.get(fid)
            if track is None or track.is_slam or fid in x.landmarks:
                continue
            if len(x.landmarks) >= cfg.m_max:
                break
            span = frame_id - track.first_frame + 1
            if span < cfg.promote_span:
                continue
            frames_in_state = {o.frame_id for o in track.observations
                               if o.frame_id in x.clones}
            if len(frames_in_state) < 2:
                continue
            p_f, why = triangulate(track, x.clones, cfg)
            if p_f is None:
                events[f"promote-tri-{why}"] = events.get(
                    f"promote-tri-{why}", 0) + 1
                continue
            anchor = min(frames_in_state)
            try:
                x, p = self._delayed_init_feature(x, p, track, p_f, anchor)
            except InitializationRejected:
                events["promote-rejected"] = events.get("promote-rejected", 0) + 1
                continue
            track.is_slam = True
            track.anchor_frame = anchor
            track.observations = []
            events["promoted"] = events.get("promoted", 0) + 1
        return x, p

    def _delayed_init_feature(self, x, p, track, p_f, anchor):
        """Split the stacked rows: 3 rotated rows initialize the landmark,
        the rest feed a standard update on the grown state."""
        cfg = self.cfg
        lay = x.layout()
        obs = [o for o in track.observations
               if o.frame_id in x.clones
               and (o.cam == 0 or cfg.stereo is not None)]
        out = feature_rows(x, lay, p_f, obs, anchor, cfg)
        if out is None or out[0].shape[0] < 4:
            raise InitializationRejected("too few rows")
        h_x, h_f, r = out
        q, rr = np.linalg.qr(h_f, mode="complete")
        h_x = q.T @ h_x
        r = q.T @ r
        sigma2 = cfg.meas_sigma ** 2
        fid = track.feature_id
        x, p = delayed_init(x, p, ("lm", fid), Landmark(p_f, anchor),
                            h_x[:3], rr[:3], r[:3], sigma2 * np.eye(3))
        if h_x.shape[0] > 3:
            lay2 = x.layout()
            h_rest = np.zeros((h_x.shape[0] - 3, lay2.dim))
            for key, _ in lay.entries:
                h_rest[:, lay2.slice(key)] = h_x[3:, lay.slice(key)]
            r_rest = r[3:]
            s = h_rest @ p @ h_rest.T + sigma2 * np.eye(h_rest.shape[0])
            gate = float(r_rest @ np.linalg.solve(s, r_rest))
            if gate <= chi2_threshold(cfg.chi2_confidence, h_rest.shape[0]):
                x, p = kalman_update(x, p, h_rest, r_rest,
                                     sigma2 * np.eye(h_rest.shape[0]))
        return x, p
