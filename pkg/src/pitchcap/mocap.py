"""Multi-view skeletal capture: triangulation, tracking, bundle adjustment.

Turns per-camera 2D keypoint detections into world-space skeleton tracks:

  * plain and hip-anchored triangulation (the anchored residual subtracts the
    mid-hip in both the detected and the projected image, cancelling
    calibration bias shared by a subject's joints);
  * frame-to-frame association by greedy point-to-ray matching, with epipolar
    grouping of leftover detections to seed new tracks;
  * joint bundle adjustment of camera parameters, player joints at selected
    anchor frames, and field landmarks, gauge-fixed by freezing one camera
    pose plus the x/y of two field corners (the field is metrically known, so
    it carries the global scale).
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .calib import add_camera_blocks, camera_block_names, camera_from_blocks
from .field import default_template
from .geometry import (Camera, NonPositiveDepth, points_to_rays_distance,
                       project_jacobians, skew)
from .skeleton import LEFT_HIP, RIGHT_HIP
from .solver import LeastSquaresProblem, SolveConfig, solve_least_squares

log = logging.getLogger(__name__)


class InsufficientViews(ValueError):
    """Fewer than two usable cameras observe the target."""


class RaysNearParallel(RuntimeError):
    """All viewing rays are within the minimum triangulation angle."""


class GaugeUnderconstrained(ValueError):
    """Bundle adjustment lacks the anchors needed to pin the gauge."""


@dataclass
class TrackingConfig:
    conf_threshold: float = 0.3      # keypoints below this are ignored
    gate_m: float = 0.4              # max mean point-to-ray distance to match
    epipolar_px: float = 5.0         # agglomerative grouping threshold
    min_ray_angle_deg: float = 0.5   # below this triangulation is refused
    max_gap: int = 10                # frames a track survives unobserved


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class Detection2D:
    """One subject's 2D keypoints in one camera at one frame."""

    frame: int
    camera: str
    joints: np.ndarray  # (J, 3) columns u, v, confidence
    subject_hint: int | None = None  # detector-side grouping, not trusted
    bbox: np.ndarray | None = None  # (4,) x, y, w, h

    def __post_init__(self):
        self.frame = int(self.frame)
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise ValueError("joints must have shape (J, 3)")
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=float).reshape(4)

    def confident(self, threshold=0.3):
        return self.joints[:, 2] >= threshold

    def to_dict(self):
        d = {
            "frame": self.frame,
            "camera": self.camera,
            "joints": [[float(v) for v in row] for row in self.joints],
        }
        if self.subject_hint is not None:
            d["subject_hint"] = int(self.subject_hint)
        if self.bbox is not None:
            d["bbox"] = [float(v) for v in self.bbox]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(frame=d["frame"], camera=d["camera"], joints=d["joints"],
                   subject_hint=d.get("subject_hint"), bbox=d.get("bbox"))


@dataclass
class SkeletonPose:
    """World-space joints of one subject at one frame."""

    frame: int
    joints: np.ndarray  # (J, 3) meters; rows are zero where invalid
    valid: np.ndarray  # (J,) bool

    def __post_init__(self):
        self.frame = int(self.frame)
        self.joints = np.asarray(self.joints, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.joints.shape != (self.valid.size, 3):
            raise ValueError("joints must have shape (J, 3) matching valid")
        if not np.all(np.isfinite(self.joints[self.valid])):
            raise ValueError("valid joints must be finite")

    def mid_hip(self):
        if not (self.valid[LEFT_HIP] and self.valid[RIGHT_HIP]):
            raise ValueError(f"frame {self.frame}: mid-hip undefined, "
                             "a hip joint is invalid")
        return 0.5 * (self.joints[LEFT_HIP] + self.joints[RIGHT_HIP])

    def to_dict(self):
        return {
            "joints": [[float(v) for v in row] for row in self.joints],
            "valid": [bool(v) for v in self.valid],
        }

    @classmethod
    def from_dict(cls, frame, d):
        return cls(frame=frame, joints=d["joints"], valid=d["valid"])


@dataclass
class Track:
    """One subject's pose sequence; at most one pose per frame."""

    id: int
    poses: dict = field(default_factory=dict)  # frame -> SkeletonPose

    def frames(self):
        return sorted(self.poses)

    @property
    def birth_frame(self):
        return min(self.poses)

    @property
    def death_frame(self):
        return max(self.poses)

    def last_pose(self):
        return self.poses[max(self.poses)]

    def add(self, pose):
        if pose.frame in self.poses:
            raise ValueError(f"track {self.id} already has frame {pose.frame}")
        self.poses[pose.frame] = pose

    def validate(self, max_gap=10):
        frames = self.frames()
        if not frames:
            raise ValueError(f"track {self.id} is empty")
        gaps = np.diff(frames) - 1
        if len(gaps) and gaps.max() > max_gap:
            raise ValueError(
                f"track {self.id}: gap of {int(gaps.max())} frames exceeds "
                f"max_gap={max_gap}")


def _camera_map(cameras):
    if isinstance(cameras, dict):
        return cameras
    return {c.name: c for c in cameras}


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------

@dataclass
class TriangulationResult:
    point: np.ndarray
    errors: dict  # camera name -> reprojection error (px)
    mean_error_px: float
    max_angle_deg: float

    @property
    def n_views(self):
        return len(self.errors)


def _normalize_observations(observations, conf_threshold):
    obs = []
    for entry in observations:
        if len(entry) == 2:
            cam, px = entry
            conf = 1.0
        else:
            cam, px, conf = entry
        if conf >= conf_threshold:
            obs.append((cam, np.asarray(px, dtype=float).reshape(2),
                        float(conf)))
    if len({cam.name for cam, _, _ in obs}) < 2:
        raise InsufficientViews(
            f"{len(obs)} observation(s) above confidence {conf_threshold}; "
            "need two distinct cameras")
    return obs


def _observation_rays(obs):
    origins = np.array([cam.center for cam, _, _ in obs])
    dirs = np.empty((len(obs), 3))
    for i, (cam, px, _) in enumerate(obs):
        xn = cam.undistort_pixels(px[None])[0]
        d = cam.R.T @ np.array([xn[0], xn[1], 1.0])
        dirs[i] = d / np.linalg.norm(d)
    return origins, dirs


def _max_pairwise_angle_deg(dirs):
    dots = np.clip(dirs @ dirs.T, -1.0, 1.0)
    ang = np.degrees(np.arccos(dots))
    np.fill_diagonal(ang, 0.0)
    return float(ang.max())


def _gauss_newton_point(X, obs, iterations):
    """Polish a 3D point against weighted pixel reprojection residuals."""
    sw = np.sqrt([w for _, _, w in obs])
    for _ in range(iterations):
        rows, res = [], []
        for (cam, px, _), s in zip(obs, sw):
            try:
                p, jac = project_jacobians(cam, X)
            except NonPositiveDepth:
                return X  # leave the linear estimate alone
            rows.append(s * jac["X"][0])
            res.append(s * (p[0] - px))
        J = np.vstack(rows)
        r = np.concatenate(res)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        X = X + delta
        if np.linalg.norm(delta) < 1e-12:
            break
    return X


def triangulate(observations, *, conf_threshold=0.3, min_angle_deg=0.5,
                polish_iterations=1):
    """Confidence-weighted linear triangulation plus a Gauss-Newton polish.

    observations: iterable of (camera, pixel) or (camera, pixel, confidence).
    The linear stage intersects undistorted viewing rays weighted by
    confidence; the polish minimizes the weighted pixel reprojection error.
    """
    obs = _normalize_observations(observations, conf_threshold)
    origins, dirs = _observation_rays(obs)
    max_angle = _max_pairwise_angle_deg(dirs)
    if max_angle < min_angle_deg:
        raise RaysNearParallel(
            f"max triangulation angle {max_angle:.3g} deg < {min_angle_deg}")

    # [d]x (X - C) = 0, rows scaled by sqrt(confidence)
    rows, rhs = [], []
    for (_, _, w), origin, d in zip(obs, origins, dirs):
        S = np.sqrt(w) * skew(d)
        rows.append(S)
        rhs.append(S @ origin)
    X, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    X = _gauss_newton_point(X, obs, polish_iterations)

    errors = {}
    for cam, px, _ in obs:
        p, ok = cam.project_masked(X)
        errors[cam.name] = float(np.linalg.norm(p[0] - px)) if ok[0] else np.inf
    return TriangulationResult(point=X, errors=errors,
                               mean_error_px=float(np.mean(list(errors.values()))),
                               max_angle_deg=max_angle)


def _unit_dirs(cam, pixels):
    xn = cam.undistort_pixels(pixels)
    dirs = np.column_stack([xn, np.ones(len(xn))]) @ cam.R  # rows are R^T v
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _solve_joints(entries, cfg, n_joints, polish_iterations=1):
    """Batched triangulation of all joints of one subject.

    entries: per camera (camera, target pixels (J,2), weights (J,), use (J,)).
    Same estimate as triangulate() -- weighted ray intersection then a
    Gauss-Newton reprojection polish -- but vectorized across joints; joints
    with fewer than two distinct cameras or a degenerate ray bundle come back
    invalid instead of raising.
    """
    joints = np.zeros((n_joints, 3))
    valid = np.zeros(n_joints, dtype=bool)
    if not entries:
        return joints, valid

    by_cam = {}
    for cam, _, _, use in entries:
        m = by_cam.setdefault(cam.name, np.zeros(n_joints, dtype=bool))
        m |= use
    support = np.sum(list(by_cam.values()), axis=0)

    dirs = [_unit_dirs(cam, targets) for cam, targets, _, _ in entries]
    # normal equations of  sum_c w ||(I - d d^T)(X - C_c)||^2
    M = np.zeros((n_joints, 3, 3))
    rhs = np.zeros((n_joints, 3))
    for (cam, _, w, use), D in zip(entries, dirs):
        Pw = (np.eye(3)[None] - D[:, :, None] * D[:, None, :]) \
            * (w * use)[:, None, None]
        M += Pw
        rhs += Pw @ cam.center
    for j in range(n_joints):
        if support[j] < 2:
            continue
        U = np.stack([D[j] for (_, _, _, use), D in zip(entries, dirs)
                      if use[j]])
        ang = np.degrees(np.arccos(np.clip(U @ U.T, -1.0, 1.0)))
        np.fill_diagonal(ang, 0.0)
        if ang.max() < cfg.min_ray_angle_deg:
            continue
        try:
            joints[j] = np.linalg.solve(M[j], rhs[j])
            valid[j] = True
        except np.linalg.LinAlgError:
            pass
    if not np.any(valid):
        return joints, valid

    idx = np.flatnonzero(valid)
    X = joints[idx]
    for _ in range(polish_iterations):
        H = np.zeros((len(idx), 3, 3))
        g = np.zeros((len(idx), 3))
        for cam, targets, w, use in entries:
            wu = (w * use)[idx]
            if not np.any(wu > 0):
                continue
            try:
                px, jac = project_jacobians(cam, X)
            except NonPositiveDepth:
                continue
            JX = jac["X"]
            r = px - targets[idx]
            H += wu[:, None, None] * np.einsum("nij,nik->njk", JX, JX)
            g += wu[:, None] * np.einsum("nij,ni->nj", JX, r)
        H += 1e-12 * np.eye(3)[None]
        X = X - np.linalg.solve(H, g[..., None])[..., 0]
    joints[idx] = X
    return joints, valid


def triangulate_pose(detections, cameras, config=None, frame=None):
    """Per-joint plain triangulation of one subject's detections."""
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    if not detections:
        raise InsufficientViews("no detections")
    if frame is None:
        frame = detections[0].frame
    n_joints = detections[0].joints.shape[0]
    entries = [(cams[d.camera], d.joints[:, :2], d.joints[:, 2],
                d.joints[:, 2] >= cfg.conf_threshold) for d in detections]
    joints, valid = _solve_joints(entries, cfg, n_joints)
    return SkeletonPose(frame=frame, joints=joints, valid=valid)


def triangulate_hip_anchored(detections, cameras, config=None, frame=None):
    """Triangulate a subject with per-camera mid-hip-anchored residuals.

    The hips are triangulated plainly first.  Each camera then gets a
    correction delta_c = projected mid-hip - detected mid-hip, where both
    mid-hips are means of the respective 2D hip points, and every joint is
    re-triangulated against the corrected targets x + delta_c.  This is
    exactly minimizing  sum_c ||(proj(X) - proj_midhip_c) - (x - midhip_c)||^2,
    which cancels reprojection bias shared across a subject's joints (stale
    intrinsics, principal-point drift).  With exact calibration every delta_c
    is zero and the result equals plain triangulation.

    Raises InsufficientViews when the hips cannot be triangulated.  Cameras
    whose detection lacks confident hips contribute no correction; joints seen
    by fewer than two corrected cameras fall back to plain triangulation.
    """
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    if not detections:
        raise InsufficientViews("no detections")
    if frame is None:
        frame = detections[0].frame
    n_joints = detections[0].joints.shape[0]

    conf_masks = [d.joints[:, 2] >= cfg.conf_threshold for d in detections]
    plain, plain_valid = _solve_joints(
        [(cams[d.camera], d.joints[:, :2], d.joints[:, 2], m)
         for d, m in zip(detections, conf_masks)], cfg, n_joints)

    for j in (LEFT_HIP, RIGHT_HIP):
        if not plain_valid[j]:
            # re-run the scalar path for the failing hip to surface the
            # specific error
            obs = [(cams[d.camera], d.joints[j, :2], d.joints[j, 2])
                   for d in detections]
            try:
                triangulate(obs, conf_threshold=cfg.conf_threshold,
                            min_angle_deg=cfg.min_ray_angle_deg)
            except InsufficientViews as e:
                raise InsufficientViews(f"mid-hip not triangulable: {e}") from e
            raise InsufficientViews("mid-hip not triangulable")

    corrections = {}
    for d in detections:
        hips = d.joints[[LEFT_HIP, RIGHT_HIP]]
        if np.any(hips[:, 2] < cfg.conf_threshold):
            continue
        proj, ok = cams[d.camera].project_masked(
            plain[[LEFT_HIP, RIGHT_HIP]])
        if np.all(ok):
            corrections[d.camera] = proj.mean(axis=0) - hips[:, :2].mean(axis=0)
    anchored, anchored_valid = _solve_joints(
        [(cams[d.camera], d.joints[:, :2] + corrections[d.camera],
          d.joints[:, 2], m)
         for d, m in zip(detections, conf_masks) if d.camera in corrections],
        cfg, n_joints)

    joints = np.where(anchored_valid[:, None], anchored, plain)
    valid = anchored_valid | plain_valid
    return SkeletonPose(frame=frame, joints=joints, valid=valid)


# ---------------------------------------------------------------------------
# frame-to-frame association
# ---------------------------------------------------------------------------

@dataclass
class TrackStepResult:
    updated: dict  # track id -> SkeletonPose at t
    new: list  # SkeletonPose for subjects born this frame
    assignments: dict  # track id -> {camera name: detection index}
    unmatched: list  # detection indices that fed (or failed) epipolar grouping


def _detection_rays(detection, camera, conf_threshold):
    mask = detection.joints[:, 2] >= conf_threshold
    return camera.center, _unit_dirs(camera, detection.joints[:, :2]), mask


def track_step(prev_poses, detections, cameras, config=None):
    """One frame of greedy track-to-detection association.

    prev_poses: {track id: SkeletonPose} from the most recent observed frame.
    Affinity is the mean point-to-ray distance over joints valid in the pose
    and confident in the detection; pairs above the gate never match.  Pairs
    are taken best-first with the deterministic tie-break
    (distance, track id, camera name, detection index); each track takes at
    most one detection per camera.  Matched detections are fused per track by
    hip-anchored triangulation; everything unmatched goes through epipolar
    grouping to propose new subjects.
    """
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    if not detections:
        return TrackStepResult(updated={}, new=[], assignments={}, unmatched=[])
    frame = detections[0].frame

    rays = [_detection_rays(d, cams[d.camera], cfg.conf_threshold)
            for d in detections]
    candidates = []
    for tid in sorted(prev_poses):
        pose = prev_poses[tid]
        for di, d in enumerate(detections):
            origin, dirs, mask = rays[di]
            shared = pose.valid & mask
            if not np.any(shared):
                continue
            dist = float(np.mean(points_to_rays_distance(
                pose.joints[shared], origin, dirs[shared])))
            if dist <= cfg.gate_m:
                candidates.append((dist, tid, d.camera, di))
    candidates.sort()

    assignments = defaultdict(dict)
    taken = set()
    for dist, tid, cam_name, di in candidates:
        if di in taken or cam_name in assignments[tid]:
            continue
        assignments[tid][cam_name] = di
        taken.add(di)

    updated = {}
    for tid in sorted(assignments):
        dets = [detections[di] for di in sorted(assignments[tid].values())]
        try:
            updated[tid] = triangulate_hip_anchored(dets, cams, cfg,
                                                    frame=frame)
        except (InsufficientViews, RaysNearParallel):
            # e.g. a single camera matched: the track coasts this frame but
            # still consumes its detection
            pass

    unmatched = [i for i in range(len(detections)) if i not in taken]
    new = associate_epipolar([detections[i] for i in unmatched], cams, cfg)
    return TrackStepResult(updated=updated, new=new,
                           assignments=dict(assignments), unmatched=unmatched)


def _symmetric_epipolar_px(cam_a, cam_b, xn_a, xn_b):
    """Mean symmetric epipolar distance between matched normalized points, px."""
    R_ab = cam_b.R @ cam_a.R.T
    t_ab = cam_b.translation - R_ab @ cam_a.translation
    E = skew(t_ab) @ R_ab
    ha = np.column_stack([xn_a, np.ones(len(xn_a))])
    hb = np.column_stack([xn_b, np.ones(len(xn_b))])
    lines_b = ha @ E.T  # epipolar line of each a-point in image b
    lines_a = hb @ E
    num = np.abs(np.sum(hb * lines_b, axis=1))
    d_b = num / np.maximum(np.linalg.norm(lines_b[:, :2], axis=1), 1e-12) \
        * float(np.mean(cam_b.focal))
    d_a = num / np.maximum(np.linalg.norm(lines_a[:, :2], axis=1), 1e-12) \
        * float(np.mean(cam_a.focal))
    return float(np.mean(0.5 * (d_a + d_b)))


def associate_epipolar(detections, cameras, config=None):
    """Group unmatched detections across cameras and triangulate new subjects.

    Pairwise affinity is the symmetric epipolar distance averaged over joints
    confident in both detections, scaled to pixels by the focal lengths.
    Groups are grown by single-linkage merges in ascending distance order,
    refusing merges that would put two detections of the same camera in one
    group; merges stop at the threshold.  Groups seen by at least two cameras
    become new poses (hip-anchored when the hips survive, else plain).
    """
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    n = len(detections)
    if n < 2:
        return []
    frame = detections[0].frame

    normalized = [cams[d.camera].undistort_pixels(d.joints[:, :2])
                  for d in detections]
    masks = [d.joints[:, 2] >= cfg.conf_threshold for d in detections]
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if detections[i].camera == detections[j].camera:
                continue
            shared = masks[i] & masks[j]
            if not np.any(shared):
                continue
            dist = _symmetric_epipolar_px(
                cams[detections[i].camera], cams[detections[j].camera],
                normalized[i][shared], normalized[j][shared])
            if dist <= cfg.epipolar_px:
                pairs.append((dist, i, j))
    pairs.sort()

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    group_cams = [{d.camera} for d in detections]
    for _, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri == rj or group_cams[ri] & group_cams[rj]:
            continue
        parent[rj] = ri
        group_cams[ri] |= group_cams[rj]

    groups = defaultdict(list)
    for i in range(n):
        groups[find(i)].append(i)

    poses = []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = sorted(groups[root])
        if len(members) < 2:
            continue
        dets = [detections[i] for i in members]
        try:
            pose = triangulate_hip_anchored(dets, cams, cfg, frame=frame)
        except (InsufficientViews, RaysNearParallel):
            pose = triangulate_pose(dets, cams, cfg, frame=frame)
        if np.any(pose.valid):
            poses.append(pose)
    return poses


def run_tracking(detections, cameras, config=None):
    """Track all subjects through a clip; returns tracks sorted by id.

    Sequential over frames: stale tracks (unobserved for more than max_gap
    frames) are retired before matching, then track_step consumes the frame's
    detections.
    """
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    by_frame = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)

    active, finished = {}, []
    next_id = 0
    for t in sorted(by_frame):
        for tid in sorted(active):
            missing = t - active[tid].last_pose().frame - 1
            if missing > cfg.max_gap:
                finished.append(active.pop(tid))
        prev = {tid: tr.last_pose() for tid, tr in active.items()}
        step = track_step(prev, by_frame[t], cams, cfg)
        for tid in sorted(step.updated):
            active[tid].add(step.updated[tid])
        for pose in step.new:
            track = Track(id=next_id)
            next_id += 1
            track.add(pose)
            active[track.id] = track
    return sorted(finished + list(active.values()), key=lambda tr: tr.id)


def filter_detections_on_field(detections, cameras, template=None,
                               margin=3.0, conf_threshold=0.3):
    """Coarse audience filter: keep detections whose mid-hip ray lands on the
    pitch rectangle (plus margin).  Rays that never reach the ground plane in
    front of the camera are dropped.
    """
    template = template or default_template()
    hx, hy = template.extent[0] / 2.0, template.extent[1] / 2.0
    cams = _camera_map(cameras)
    kept = []
    for d in detections:
        conf = d.joints[:, 2] >= conf_threshold
        hips = conf[LEFT_HIP] and conf[RIGHT_HIP]
        if hips:
            px = d.joints[[LEFT_HIP, RIGHT_HIP], :2].mean(axis=0)
        elif np.any(conf):
            px = d.joints[conf, :2].mean(axis=0)
        else:
            continue
        ray = cams[d.camera].unproject_ray(px)
        if abs(ray.direction[2]) < 1e-9:
            continue
        t = -ray.origin[2] / ray.direction[2]
        if t <= 0:
            continue
        ground = ray.point_at(t)
        if abs(ground[0]) <= hx + margin and abs(ground[1]) <= hy + margin:
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# bundle adjustment
# ---------------------------------------------------------------------------

@dataclass
class BAObservation:
    point: str  # key into BAProblem.points
    camera: str
    px: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.px = np.asarray(self.px, dtype=float).reshape(2)


@dataclass
class BAProblem:
    """Joint camera + structure refinement problem.

    points holds both player joints ("p/<track>/<frame>/<joint>") and field
    landmarks ("l/<id>"); landmarks are refined like any other point but the
    x/y of the anchor corners are frozen to pin scale and gauge.
    """

    cameras: list
    points: dict  # key -> (3,) initial position
    observations: list
    anchor_landmarks: list  # point keys whose x/y stay frozen

    def validate(self):
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValueError("duplicate camera names")
        known = set(names)
        seen = defaultdict(set)
        for obs in self.observations:
            if obs.point not in self.points:
                raise ValueError(f"observation of unknown point {obs.point!r}")
            if obs.camera not in known:
                raise ValueError(f"observation from unknown camera {obs.camera!r}")
            seen[obs.point].add(obs.camera)
        for key in self.points:
            if len(seen[key]) < 2:
                raise ValueError(
                    f"point {key!r} observed by {len(seen[key])} camera(s); "
                    "every point needs at least two")


@dataclass
class BAOptions:
    square_pixels: bool = True
    use_k3: bool = False
    refine_intrinsics: bool = True
    release_principal: bool = False
    gauge_camera: str | None = None  # default: first camera in the problem
    outlier_factor: float = 3.0
    # keeps the 3 x median rule from flagging machine noise when a synthetic
    # problem converges to ~0 residual; no physical outlier is ever this small
    outlier_floor_px: float = 1e-9
    max_iterations: int = 100


@dataclass
class BAResult:
    cameras: list
    points: dict
    outliers: list  # (point key, camera, error px), largest first
    rms_px: float
    solver: object

    @property
    def initial_cost(self):
        return self.solver.initial_cost

    @property
    def final_cost(self):
        return self.solver.final_cost


def _reprojection_with_points(name, image_size, point_idx, observed, weights,
                              n_points, square_pixels):
    """Residual/Jacobian closures over camera blocks plus the shared points
    block.  Same behind-camera guard as the static-calibration residuals."""
    point_idx = np.asarray(point_idx, dtype=int)
    observed = np.asarray(observed, dtype=float)
    sw = np.sqrt(np.asarray(weights, dtype=float))
    rows = len(point_idx)

    def build(f, c, k, q, t):
        return camera_from_blocks(name, image_size, f, c, k, q, t)

    def fn(f, c, k, q, t, pts):
        cam = build(f, c, k, q, t)
        X = pts.reshape(n_points, 3)[point_idx]
        px, valid = cam.project_masked(X)
        r = np.where(valid[:, None], px - observed, 1e4)
        return (r * sw[:, None]).reshape(-1)

    def jac(f, c, k, q, t, pts):
        cam = build(f, c, k, q, t)
        X = pts.reshape(n_points, 3)[point_idx]
        _, valid = cam.project_masked(X)
        if not np.all(valid):
            X = np.where(valid[:, None], X, cam.center + cam.R.T @ [0, 0, 5.0])
        _, J = project_jacobians(cam, X)
        vs = (valid[:, None] * sw[:, None])[:, :, None]
        Jf = (J["f"] * vs)
        if square_pixels:
            Jf = Jf.sum(axis=2, keepdims=True)
        JX = (J["X"] * vs).reshape(-1)
        ii = np.repeat(np.arange(2 * rows), 3)
        jj = np.repeat(point_idx, 6) * 3 + np.tile(np.arange(3), 2 * rows)
        Jpts = sp.coo_matrix((JX, (ii, jj)), shape=(2 * rows, 3 * n_points))
        return [Jf.reshape(2 * rows, -1),
                (J["c"] * vs).reshape(2 * rows, -1),
                (J["k"] * vs).reshape(2 * rows, -1),
                (J["rot"] * vs).reshape(2 * rows, -1),
                (J["t"] * vs).reshape(2 * rows, -1),
                Jpts]

    return fn, jac


def bundle_adjust(problem, opts=None):
    """Jointly refine cameras and 3D points against their 2D observations.

    Gauge: the designated camera's pose is frozen, and the x/y coordinates of
    the anchor landmarks (field corners with metrically known positions) are
    frozen, which also pins global scale.  After convergence, observations
    with reprojection error above outlier_factor x median are flagged.
    """
    opts = opts or BAOptions()
    anchors = [a for a in problem.anchor_landmarks if a in problem.points]
    if len(anchors) < 2:
        raise GaugeUnderconstrained(
            f"{len(anchors)} anchor landmark(s) present; need two to pin "
            "scale and gauge")
    problem.validate()

    keys = sorted(problem.points)
    index = {k: i for i, k in enumerate(keys)}
    values = np.concatenate([np.asarray(problem.points[k], dtype=float)
                             .reshape(3) for k in keys])
    mask = np.ones(values.size, dtype=bool)
    for a in anchors:
        mask[3 * index[a]:3 * index[a] + 2] = False

    gauge = opts.gauge_camera or problem.cameras[0].name
    cam_names = [c.name for c in problem.cameras]
    if gauge not in cam_names:
        raise ValueError(f"gauge camera {gauge!r} not in problem")

    ls = LeastSquaresProblem()
    ls.add_parameter_block("points", values, mask=mask)
    for cam in problem.cameras:
        add_camera_blocks(ls, f"cam/{cam.name}", cam,
                          square_pixels=opts.square_pixels,
                          use_k3=opts.use_k3,
                          freeze_principal=not opts.release_principal,
                          freeze_pose=cam.name == gauge,
                          freeze_intrinsics=not opts.refine_intrinsics)

    by_cam = defaultdict(list)
    for obs in problem.observations:
        by_cam[obs.camera].append(obs)
    for cam in problem.cameras:
        group = by_cam.get(cam.name)
        if not group:
            continue
        fn, jac = _reprojection_with_points(
            cam.name, cam.image_size,
            [index[o.point] for o in group],
            [o.px for o in group],
            [o.weight for o in group],
            len(keys), opts.square_pixels)
        ls.add_residual_block(fn, camera_block_names(f"cam/{cam.name}")
                              + ["points"], dim=2 * len(group), jac=jac,
                              name=f"reproj/{cam.name}")

    report = solve_least_squares(ls, SolveConfig(
        max_iterations=opts.max_iterations))

    refined_cams = [camera_from_blocks(
        cam.name, cam.image_size,
        *(ls.values(f"cam/{cam.name}/{s}") for s in ("f", "c", "k", "q", "t")))
        for cam in problem.cameras]
    pts = ls.values("points").reshape(-1, 3)
    refined_points = {k: pts[i].copy() for k, i in index.items()}

    cam_by_name = {c.name: c for c in refined_cams}
    scored = []
    for obs in problem.observations:
        px, ok = cam_by_name[obs.camera].project_masked(
            refined_points[obs.point])
        err = float(np.linalg.norm(px[0] - obs.px)) if ok[0] else np.inf
        scored.append((obs.point, obs.camera, err))
    errors = np.array([e for _, _, e in scored])
    median = float(np.median(errors))
    cutoff = max(opts.outlier_factor * median, opts.outlier_floor_px)
    outliers = sorted((s for s in scored if s[2] > cutoff),
                      key=lambda s: -s[2])
    rms = float(np.sqrt(np.mean(np.square(errors[np.isfinite(errors)]))))
    log.info("bundle adjustment: %s; rms %.4g px; %d outliers",
             report, rms, len(outliers))
    return BAResult(cameras=refined_cams, points=refined_points,
                    outliers=outliers, rms_px=rms, solver=report)


# ---------------------------------------------------------------------------
# anchor frames and problem assembly
# ---------------------------------------------------------------------------

def match_pose_detections(pose, detections, cameras, conf_threshold=0.3,
                          gate_px=20.0):
    """Re-associate a 3D pose with per-camera detections by projection.

    Returns {camera name: detection index} for the detection (of that camera)
    whose confident joints lie closest to the projected pose, if within
    gate_px mean distance.
    """
    cams = _camera_map(cameras)
    best = {}
    for di, d in enumerate(detections):
        cam = cams[d.camera]
        shared = pose.valid & (d.joints[:, 2] >= conf_threshold)
        if not np.any(shared):
            continue
        px, ok = cam.project_masked(pose.joints[shared])
        if not np.any(ok):
            continue
        dist = float(np.mean(np.linalg.norm(
            px[ok] - d.joints[shared][ok, :2], axis=1)))
        if dist <= gate_px and (d.camera not in best or dist < best[d.camera][0]):
            best[d.camera] = (dist, di)
    return {cam: di for cam, (_, di) in best.items()}


def select_anchor_frames(tracks, detections, cameras, *, min_cameras=6,
                         min_conf=0.8, cap=20, conf_threshold=0.3,
                         gate_px=20.0):
    """Automatic stand-in for hand-picking high-quality frames.

    A frame qualifies when every track alive there is matched in at least
    min_cameras cameras whose detections average at least min_conf keypoint
    confidence.  At most cap frames are kept, evenly subsampled.
    """
    by_frame = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)
    frames = sorted({f for tr in tracks for f in tr.poses} & set(by_frame))

    chosen = []
    for f in frames:
        live = [tr for tr in tracks if f in tr.poses]
        if not live:
            continue
        ok = True
        for tr in live:
            matched = match_pose_detections(tr.poses[f], by_frame[f], cameras,
                                            conf_threshold, gate_px)
            if len(matched) < min_cameras:
                ok = False
                break
            confs = [float(np.mean(by_frame[f][di].joints[:, 2]))
                     for di in matched.values()]
            if np.mean(confs) < min_conf:
                ok = False
                break
        if ok:
            chosen.append(f)
    if len(chosen) > cap:
        idx = np.unique(np.round(np.linspace(0, len(chosen) - 1, cap))
                        .astype(int))
        chosen = [chosen[i] for i in idx]
    return chosen


def build_ba_problem(cameras, tracks, detections, template=None, picks=None,
                     *, anchor_frames=None,
                     anchor_landmark_ids=("corner_nw", "corner_se"),
                     conf_threshold=0.3, gate_px=20.0):
    """Assemble a BAProblem from tracking output and landmark picks.

    picks: iterable of CorrespondenceSet (one per camera).  Landmarks and
    joints observed by fewer than two cameras are left out (they cannot be
    constrained).  anchor_frames defaults to select_anchor_frames().
    """
    template = template or default_template()
    cams = _camera_map(cameras)
    by_frame = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)
    if anchor_frames is None:
        anchor_frames = select_anchor_frames(tracks, detections, cams,
                                             conf_threshold=conf_threshold,
                                             gate_px=gate_px)

    points, observations = {}, []
    for f in anchor_frames:
        for tr in sorted(tracks, key=lambda t: t.id):
            if f not in tr.poses:
                continue
            pose = tr.poses[f]
            matched = match_pose_detections(pose, by_frame[f], cams,
                                            conf_threshold, gate_px)
            for j in range(pose.valid.size):
                if not pose.valid[j]:
                    continue
                obs = [(cam_name, by_frame[f][di].joints[j])
                       for cam_name, di in sorted(matched.items())
                       if by_frame[f][di].joints[j, 2] >= conf_threshold]
                if len({c for c, _ in obs}) < 2:
                    continue
                key = f"p/{tr.id}/{f}/{j}"
                points[key] = pose.joints[j].copy()
                observations += [BAObservation(point=key, camera=c, px=row[:2])
                                 for c, row in obs]

    for cs in (picks or []):
        for lid, px in cs.pairs:
            key = f"l/{lid}"
            if key not in points:
                points[key] = np.asarray(template.landmark(lid), dtype=float)
            observations.append(BAObservation(point=key, camera=cs.camera,
                                              px=px))
    # prune under-observed landmarks (player joints were pre-filtered)
    counts = defaultdict(set)
    for obs in observations:
        counts[obs.point].add(obs.camera)
    drop = {k for k in points if len(counts[k]) < 2}
    points = {k: v for k, v in points.items() if k not in drop}
    observations = [o for o in observations if o.point not in drop]

    return BAProblem(cameras=list(cams.values()), points=points,
                     observations=observations,
                     anchor_landmarks=[f"l/{i}" for i in anchor_landmark_ids])


def retriangulate_tracks(tracks, detections, cameras, config=None,
                         gate_px=20.0):
    """Rebuild every track pose with (typically refined) cameras."""
    cfg = config or TrackingConfig()
    cams = _camera_map(cameras)
    by_frame = defaultdict(list)
    for d in detections:
        by_frame[d.frame].append(d)
    out = []
    for tr in tracks:
        fresh = Track(id=tr.id)
        for f in tr.frames():
            pose = tr.poses[f]
            matched = match_pose_detections(pose, by_frame.get(f, []), cams,
                                            cfg.conf_threshold, gate_px)
            dets = [by_frame[f][di] for _, di in sorted(matched.items())]
            try:
                fresh.add(triangulate_hip_anchored(dets, cams, cfg, frame=f))
            except (InsufficientViews, RaysNearParallel):
                fresh.add(pose)
        out.append(fresh)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_detections_jsonl(path, detections):
    with open(path, "w") as fp:
        for d in detections:
            fp.write(json.dumps(d.to_dict()) + "\n")


def read_detections_jsonl(path):
    out = []
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line:
                out.append(Detection2D.from_dict(json.loads(line)))
    return out


def tracks_to_dict(tracks):
    return {"v": 1, "tracks": [
        {"id": tr.id,
         "frames": {str(f): tr.poses[f].to_dict() for f in tr.frames()}}
        for tr in sorted(tracks, key=lambda t: t.id)]}


def tracks_from_dict(d):
    out = []
    for entry in d["tracks"]:
        tr = Track(id=int(entry["id"]))
        for f, pd in entry["frames"].items():
            tr.add(SkeletonPose.from_dict(int(f), pd))
        out.append(tr)
    return sorted(out, key=lambda t: t.id)


def write_tracks_json(path, tracks):
    with open(path, "w") as fp:
        json.dump(tracks_to_dict(tracks), fp, indent=1)


def read_tracks_json(path):
    with open(path) as fp:
        return tracks_from_dict(json.load(fp))
