"""Synthetic ground truth: camera rigs, moving subjects, broadcast sweeps.

Every end-to-end test runs against scenes from this module: a ring of
static cameras around the pitch, subjects walking smooth waypoint paths
with a periodic gait articulated through the parametric body model, and a
fixed-mount broadcast camera panning after the crowd centroid while it
zooms.  ``render_observations`` then projects the ground truth into
everything the reconstruction consumes — per-camera keypoint detections,
rasterized marking edge maps, manual-style landmark picks, and broadcast
frame observations — with controlled Gaussian noise, dropout and outliers.

All randomness flows from one ``np.random.SeedSequence`` per scene with
spawned substreams per camera / subject / consumer, so identical configs
produce byte-identical output no matter how generation is parallelized.
"""

import math
from dataclasses import asdict, dataclass, field as _field, replace

import numpy as np

from .body import BodyParams, default_body_model, forward
from .broadcast import BroadcastSequence, FrameObservations
from .calib import CorrespondenceSet
from .field import (
    PITCH_LENGTH,
    PITCH_WIDTH,
    crown_height,
    default_template,
    sample_markings,
)
from .geometry import (
    Camera,
    camera_from_center,
    look_at_rotation,
    matrix_to_quat,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
)
from .mocap import Detection2D, SkeletonPose, Track
from .skeleton import N_JOINTS

__all__ = [
    "MotionSpec",
    "NoiseSpec",
    "RenderedObservations",
    "RigSpec",
    "SceneBundle",
    "SceneConfig",
    "SubjectBody",
    "generate_scene",
    "perturb_broadcast",
    "perturb_cameras",
    "render_observations",
]


@dataclass
class RigSpec:
    """Static ring of cameras: positions around the pitch, aimed inward."""

    n_cameras: int = 16             # 10..18, mirroring a stadium install
    height_range: tuple = (12.0, 24.0)    # m above the pitch
    standoff_range: tuple = (8.0, 20.0)   # m beyond the touch/goal lines
    focal_range: tuple = (1400.0, 2200.0)  # px
    look_policy: str = "spread"     # "spread" | "corner"
    image_size: tuple = (1920, 1080)


@dataclass
class MotionSpec:
    """Smooth waypoint walking with a sinusoidal speed profile.

    Waypoints stay ``waypoint_margin`` inside the pitch, and a subject
    steering toward an inside target can overshoot that region outward by
    at most its turning radius (max_speed / turn_rate).  Keeping the
    radius under the margin makes the bounds invariant geometric — no
    position clamping that would corrupt the travelled-distance oracle.
    """

    base_speed: float = 4.0         # m/s, sinusoid mean
    speed_amplitude: float = 1.5    # m/s
    speed_period_s: float = 12.0
    min_speed: float = 0.5          # m/s, clip floor
    max_speed: float = 9.0          # m/s, clip ceiling
    turn_rate: float = 3.0          # rad/s steering limit
    waypoint_margin: float = 4.0    # m inside the pitch boundary
    stride_m: float = 1.4           # gait wavelength: one cycle per stride
    gait_amplitude: float = 0.5     # rad, limb swing at base speed


@dataclass
class NoiseSpec:
    """Observation corruption and calibration perturbation magnitudes."""

    keypoint_sigma_px: float = 0.0
    dropout: float = 0.0            # whole-detection drop probability
    outlier_rate: float = 0.0       # per-joint gross-error probability
    pick_sigma_px: float = 0.0      # manual-pick jitter
    camera_rot_deg: float = 0.0     # static-rig init perturbation
    camera_trans_m: float = 0.0
    broadcast_rot_deg: float = 0.0  # broadcast init perturbation
    broadcast_focal_rel: float = 0.0


@dataclass
class SceneConfig:
    seed: int = 0
    n_frames: int = 300
    fps: float = 50.0
    n_subjects: int = 22
    officials: int = 0              # extra slow-moving subjects
    rig: RigSpec = _field(default_factory=RigSpec)
    motion: MotionSpec = _field(default_factory=MotionSpec)
    noise: NoiseSpec = _field(default_factory=NoiseSpec)
    broadcast: bool = True
    broadcast_focal: tuple = (2000.0, 6000.0)  # px sweep over the clip
    n_picks: int = 12               # landmark picks per static camera
    n_broadcast_field: int = 30     # field points per broadcast frame

    def validate(self):
        if not 10 <= self.rig.n_cameras <= 18:
            raise ValueError(
                f"rig wants 10..18 cameras, got {self.rig.n_cameras}")
        if self.n_frames < 1 or self.fps <= 0:
            raise ValueError("need at least one frame and a positive fps")
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")
        if self.motion.max_speed > 9.0:
            raise ValueError("subjects do not exceed 9 m/s")
        if self.rig.look_policy not in ("spread", "corner"):
            raise ValueError(f"unknown look policy {self.rig.look_policy!r}")
        margin = self.motion.waypoint_margin
        if self.motion.max_speed / self.motion.turn_rate > margin:
            raise ValueError("turning radius exceeds the waypoint margin; "
                             "subjects could leave the pitch")

    def to_dict(self):
        def listify(v):
            if isinstance(v, dict):
                return {k: listify(x) for k, x in v.items()}
            if isinstance(v, tuple):
                return [listify(x) for x in v]
            return v

        d = listify(asdict(self))
        d["v"] = 1
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("v", None)
        for key, sub in (("rig", RigSpec), ("motion", MotionSpec),
                         ("noise", NoiseSpec)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in d[key].items()})
        for key in ("broadcast_focal",):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SubjectBody:
    """Ground-truth body state behind one track."""

    subject: int
    beta: np.ndarray
    params: list            # BodyParams per frame
    role: str = "player"    # "player" | "official"


@dataclass
class SceneBundle:
    config: SceneConfig
    template: object
    cameras: list           # geometry.Camera
    tracks: list            # mocap.Track, COCO-17 keypoints
    bodies: list            # SubjectBody, aligned with tracks
    broadcast: BroadcastSequence | None


def _substreams(seed):
    return np.random.SeedSequence(seed).spawn(4)  # rig, subjects, bc, render


# ---------------------------------------------------------------------------
# rig
# ---------------------------------------------------------------------------

_SPREAD_TARGETS = [(-26.0, -11.0), (0.0, -11.0), (26.0, -11.0),
                   (26.0, 11.0), (0.0, 11.0), (-26.0, 11.0)]


def _make_rig(rig, rng, template):
    hx, hy = PITCH_LENGTH / 2.0, PITCH_WIDTH / 2.0
    w, h = rig.image_size
    principal = ((w - 1) / 2.0, (h - 1) / 2.0)
    landmarks = np.stack([p for _, p in template.landmarks])
    cameras = []
    for i in range(rig.n_cameras):
        ang = 2.0 * math.pi * (i + rng.uniform(-0.2, 0.2)) / rig.n_cameras
        standoff = rng.uniform(*rig.standoff_range)
        # walk out from the pitch rectangle along the ray, then add the
        # standoff, so every mount clears the playing surface
        c, s = math.cos(ang), math.sin(ang)
        r = min(hx / max(abs(c), 1e-12), hy / max(abs(s), 1e-12)) + standoff
        center = np.array([r * c, r * s, rng.uniform(*rig.height_range)])
        if rig.look_policy == "corner":
            target = np.array([44.0, 26.0]) + rng.uniform(-2.0, 2.0, 2)
        else:
            target = np.asarray(_SPREAD_TARGETS[i % len(_SPREAD_TARGETS)]) \
                + rng.uniform(-3.0, 3.0, 2)
        f = rng.uniform(*rig.focal_range)
        dist = (rng.uniform(-0.08, -0.01), rng.uniform(0.0, 0.02), 0.0)
        # some mounts frame too few landmarks for a 6-point resection at
        # the drawn aim and focal; fall back to wider, more central views
        # (like picking a shorter lens for that position) and keep the
        # first that clears the minimum
        far = -14.0 * center[:2] / np.linalg.norm(center[:2])
        candidates = [((target[0], target[1], 0.0), f),
                      ((0.0, 0.0, 0.0), f),
                      ((0.0, 0.0, 0.0), rig.focal_range[0]),
                      ((far[0], far[1], 0.0), rig.focal_range[0])]
        best, best_n = None, -1
        for aim, fc in candidates:
            R = look_at_rotation(center, aim)
            cam = camera_from_center(f"cam{i:02d}", rig.image_size, (fc, fc),
                                     principal, dist, R, center)
            px, ok = cam.project_masked(landmarks)
            n = int(np.sum(ok & cam.in_image(px)))
            if n > best_n:
                best, best_n = cam, n
            if n >= 6:
                break
        cameras.append(best)
    return cameras


# ---------------------------------------------------------------------------
# subjects
# ---------------------------------------------------------------------------

# default_body_model joint order: articulation indices into theta_b
# (= body joint index - 1)
_L_HIP, _R_HIP = 0, 1
_L_KNEE, _R_KNEE = 3, 4
_L_SHOULDER, _R_SHOULDER = 15, 16
_L_ELBOW, _R_ELBOW = 17, 18
_ARM_DOWN = 1.25  # rad about x, brings T-pose arms to the sides


def _gait_pose(n_joints, phase, swing):
    """Axis-angle body pose for one gait phase; template faces +x."""
    th = np.zeros((n_joints - 1, 3))
    s = math.sin(phase)
    th[_L_HIP, 1] = -swing * s
    th[_R_HIP, 1] = swing * s
    # knees flex while their leg swings forward, never hyperextend
    th[_L_KNEE, 1] = 0.45 * swing * (1.0 + math.cos(phase))
    th[_R_KNEE, 1] = 0.45 * swing * (1.0 - math.cos(phase))
    th[_L_SHOULDER] = (-_ARM_DOWN, 0.7 * swing * s, 0.0)
    th[_R_SHOULDER] = (_ARM_DOWN, -0.7 * swing * s, 0.0)
    th[_L_ELBOW, 1] = 0.30
    th[_R_ELBOW, 1] = -0.30
    return th.reshape(-1)


def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _simulate_subject(sid, rng, config, model, role):
    ms = config.motion
    dt = 1.0 / config.fps
    hx, hy = PITCH_LENGTH / 2.0, PITCH_WIDTH / 2.0
    lo = np.array([-hx + ms.waypoint_margin, -hy + ms.waypoint_margin])
    hi = -lo
    if role == "official":
        base, amp = 2.0, 0.8
    else:
        base, amp = ms.base_speed, ms.speed_amplitude

    pos = rng.uniform(lo, hi)
    heading = rng.uniform(-math.pi, math.pi)
    speed_phase = rng.uniform(0.0, 2.0 * math.pi)
    gait_phase = rng.uniform(0.0, 2.0 * math.pi)
    target = rng.uniform(lo, hi)
    beta = rng.normal(0.0, 0.8, model.n_shapes)

    track = Track(id=sid)
    params_seq = []
    omega = 2.0 * math.pi / ms.speed_period_s
    for t in range(config.n_frames):
        speed = float(np.clip(base + amp * math.sin(omega * t * dt
                                                    + speed_phase),
                              ms.min_speed, ms.max_speed))
        bearing = math.atan2(target[1] - pos[1], target[0] - pos[0])
        turn = np.clip(_wrap_angle(bearing - heading),
                       -ms.turn_rate * dt, ms.turn_rate * dt)
        heading = _wrap_angle(heading + turn)
        pos = pos + speed * dt * np.array([math.cos(heading),
                                           math.sin(heading)])
        if np.linalg.norm(target - pos) < 2.0:
            target = rng.uniform(lo, hi)
        gait_phase += 2.0 * math.pi * speed * dt / ms.stride_m

        swing = ms.gait_amplitude * float(np.clip(speed / 4.0, 0.3, 1.5))
        params = BodyParams(
            theta_r=np.array([0.0, 0.0, heading]),
            theta_b=_gait_pose(model.n_joints, gait_phase, swing),
            t=np.array([pos[0], pos[1], 0.0]), beta=beta)
        body, keypoints = forward(model, params)
        lift = crown_height(pos[0], pos[1]) - body[:, 2].min()
        params = replace(params, t=params.t + [0.0, 0.0, lift])
        track.add(SkeletonPose(frame=t, joints=keypoints + [0, 0, lift],
                               valid=np.ones(N_JOINTS, dtype=bool)))
        params_seq.append(params)
    return track, SubjectBody(subject=sid, beta=beta, params=params_seq,
                              role=role)


# ---------------------------------------------------------------------------
# broadcast trajectory
# ---------------------------------------------------------------------------

def _broadcast_sequence(config, tracks, rng):
    """Fixed mount behind the south stand, panning after the crowd."""
    from .skeleton import LEFT_HIP, RIGHT_HIP

    F = config.n_frames
    roots = np.zeros((F, 2))
    for t in range(F):
        mids = [0.5 * (tr.poses[t].joints[LEFT_HIP]
                       + tr.poses[t].joints[RIGHT_HIP])[:2]
               for tr in tracks if t in tr.poses]
        roots[t] = np.mean(mids, axis=0)
    # box-smooth the centroid so the pan does not inherit gait jitter
    win = min(25, F)
    kernel = np.ones(win) / win
    padded = np.concatenate([np.repeat(roots[:1], win // 2, 0), roots,
                             np.repeat(roots[-1:], win - 1 - win // 2, 0)])
    targets = np.stack([np.convolve(padded[:, k], kernel, mode="valid")
                        for k in range(2)], axis=1)

    center = np.array([0.0, -(PITCH_WIDTH / 2.0 + 11.0), 18.0])
    w, h = config.rig.image_size
    quats = [matrix_to_quat(look_at_rotation(
        center, (targets[t, 0], targets[t, 1], 0.0))) for t in range(F)]
    return BroadcastSequence(
        clip=f"scene{config.seed:04d}", center=center,
        focal=np.linspace(*config.broadcast_focal, F),
        principal=np.tile([(w - 1) / 2.0, (h - 1) / 2.0], (F, 1)),
        dist=np.tile([-0.05, 0.01, 0.0], (F, 1)),
        rotation_quat_wxyz=np.stack(quats), image_size=(w, h))


def generate_scene(config):
    """Deterministic ground-truth bundle for one scene config."""
    config.validate()
    rig_ss, subj_ss, bc_ss, _ = _substreams(config.seed)
    template = default_template()
    cameras = _make_rig(config.rig, np.random.default_rng(rig_ss), template)
    model = default_body_model()

    n_total = config.n_subjects + config.officials
    tracks, bodies = [], []
    for sid, stream in enumerate(subj_ss.spawn(n_total)):
        role = "player" if sid < config.n_subjects else "official"
        track, bod = _simulate_subject(sid, np.random.default_rng(stream),
                                       config, model, role)
        tracks.append(track)
        bodies.append(bod)

    broadcast = None
    if config.broadcast:
        broadcast = _broadcast_sequence(config, tracks,
                                        np.random.default_rng(bc_ss))
    return SceneBundle(config=config, template=template, cameras=cameras,
                       tracks=tracks, bodies=bodies, broadcast=broadcast)


# ---------------------------------------------------------------------------
# observation rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderedObservations:
    detections: dict        # camera name -> [Detection2D]
    edge_maps: dict         # camera name -> (H, W) uint8, 255 on markings
    picks: dict             # camera name -> CorrespondenceSet
    broadcast_observations: dict | None   # frame -> FrameObservations
    broadcast_init: BroadcastSequence | None
    cameras_init: list      # perturbed copies of the rig (init for solvers)


def _detect_subject(cam, pose, rng, noise):
    px, ok = cam.project_masked(pose.joints)
    vis = ok & pose.valid & cam.in_image(px)
    if vis.sum() < 6:
        return None
    if noise.dropout > 0 and rng.uniform() < noise.dropout:
        return None
    joints = np.zeros((N_JOINTS, 3))
    joints[vis, :2] = px[vis]
    joints[vis, 2] = 1.0
    if noise.keypoint_sigma_px > 0:
        joints[vis, :2] += rng.normal(0.0, noise.keypoint_sigma_px,
                                      (int(vis.sum()), 2))
    if noise.outlier_rate > 0:
        w, h = cam.image_size
        for k in np.flatnonzero(vis):
            if rng.uniform() < noise.outlier_rate:
                joints[k, :2] = rng.uniform((0.0, 0.0), (w - 1.0, h - 1.0))
    return joints


def _render_camera(cam, tracks, rng, noise):
    dets = []
    frames = sorted({f for tr in tracks for f in tr.poses})
    for f in frames:
        for tr in tracks:
            pose = tr.poses.get(f)
            if pose is None:
                continue
            joints = _detect_subject(cam, pose, rng, noise)
            if joints is not None:
                dets.append(Detection2D(frame=f, camera=cam.name,
                                        joints=joints, subject_hint=tr.id))
    return dets


def _edge_map(cam, template, spacing=0.02):
    w, h = cam.image_size
    edges = np.zeros((h, w), dtype=np.uint8)
    samples = sample_markings(template, spacing)
    px, ok = cam.project_masked(samples)
    keep = ok & cam.in_image(px)
    u = np.rint(px[keep, 0]).astype(int)
    v = np.rint(px[keep, 1]).astype(int)
    edges[np.clip(v, 0, h - 1), np.clip(u, 0, w - 1)] = 255
    return edges


def _render_picks(cam, template, rng, n_picks, sigma):
    pairs = []
    for ident in template.landmark_ids():
        px, ok = cam.project_masked(template.landmark(ident))
        if ok[0] and cam.in_image(px)[0]:
            pairs.append((ident, px[0]))
    if len(pairs) > n_picks:
        idx = np.linspace(0, len(pairs) - 1, n_picks).astype(int)
        pairs = [pairs[i] for i in idx]
    if sigma > 0:
        w, h = cam.image_size
        pairs = [(i, np.clip(p + rng.normal(0.0, sigma, 2),
                             (0.0, 0.0), (w - 1.0, h - 1.0)))
                 for i, p in pairs]
    return CorrespondenceSet(camera=cam.name, pairs=pairs)


def _render_broadcast(bundle, rng, noise):
    config = bundle.config
    seq = bundle.broadcast
    ids, pts = bundle.template.all_points()
    obs = {}
    for t in range(seq.n_frames):
        cam = seq.camera(t)
        px, ok = cam.project_masked(pts)
        keep = np.flatnonzero(ok & cam.in_image(px))
        if len(keep) > config.n_broadcast_field:
            keep = keep[np.linspace(0, len(keep) - 1,
                                    config.n_broadcast_field).astype(int)]
        field_points = []
        for i in keep:
            if noise.dropout > 0 and rng.uniform() < noise.dropout:
                continue
            p = px[i].copy()
            if noise.keypoint_sigma_px > 0:
                w, h = cam.image_size
                p = np.clip(p + rng.normal(0.0, noise.keypoint_sigma_px, 2),
                            (0.0, 0.0), (w - 1.0, h - 1.0))
            field_points.append((ids[i], p))
        players = []
        for tr in bundle.tracks:
            pose = tr.poses.get(t)
            if pose is None:
                continue
            joints = _detect_subject(cam, pose, rng, noise)
            if joints is not None:
                players.append(Detection2D(frame=t, camera="broadcast",
                                           joints=joints,
                                           subject_hint=tr.id))
        if field_points or players:
            obs[t] = FrameObservations(frame=t, field_points=field_points,
                                       players=players)
    return obs


def perturb_cameras(cameras, rng, rot_deg, trans_m):
    """Copies with an exact-magnitude random rotation/center offset each."""
    out = []
    for cam in cameras:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dq = quat_from_axis_angle(axis * np.deg2rad(rot_deg))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        q = quat_mul(dq, cam.rotation_quat_wxyz)
        center = cam.center + trans_m * direction
        out.append(Camera(
            name=cam.name, image_size=cam.image_size, focal=cam.focal.copy(),
            principal=cam.principal.copy(), dist=cam.dist.copy(),
            rotation_quat_wxyz=q,
            translation=-quat_to_matrix(q) @ center))
    return out


def perturb_broadcast(seq, rng, rot_deg, focal_rel):
    """Noisy init: per-frame exact-angle rotation + signed focal error."""
    quats = []
    for t in range(seq.n_frames):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dq = quat_from_axis_angle(axis * np.deg2rad(rot_deg))
        quats.append(quat_mul(dq, seq.rotation_quat_wxyz[t]))
    focal = seq.focal * (1.0 + focal_rel * rng.choice([-1.0, 1.0],
                                                      seq.n_frames))
    return BroadcastSequence(
        clip=seq.clip, center=seq.center.copy(), focal=focal,
        principal=seq.principal.copy(), dist=seq.dist.copy(),
        rotation_quat_wxyz=np.stack(quats), image_size=seq.image_size)


def render_observations(bundle, noise=None):
    """Project the bundle into every observation format, with corruption."""
    config = bundle.config
    noise = noise if noise is not None else config.noise
    _, _, _, render_ss = _substreams(config.seed)
    streams = render_ss.spawn(len(bundle.cameras) + 3)
    cam_streams = streams[:len(bundle.cameras)]
    picks_rng = np.random.default_rng(streams[-3])
    bc_rng = np.random.default_rng(streams[-2])
    init_rng = np.random.default_rng(streams[-1])

    detections, edge_maps, picks = {}, {}, {}
    for cam, stream in zip(bundle.cameras, cam_streams):
        rng = np.random.default_rng(stream)
        detections[cam.name] = _render_camera(cam, bundle.tracks, rng, noise)
        edge_maps[cam.name] = _edge_map(cam, bundle.template)
        picks[cam.name] = _render_picks(cam, bundle.template, picks_rng,
                                        config.n_picks,
                                        noise.pick_sigma_px)

    broadcast_obs = broadcast_init = None
    if bundle.broadcast is not None:
        broadcast_obs = _render_broadcast(bundle, bc_rng, noise)
        broadcast_init = perturb_broadcast(
            bundle.broadcast, init_rng,
            noise.broadcast_rot_deg, noise.broadcast_focal_rel)

    cameras_init = perturb_cameras(bundle.cameras, init_rng,
                                   noise.camera_rot_deg,
                                   noise.camera_trans_m)
    return RenderedObservations(
        detections=detections, edge_maps=edge_maps, picks=picks,
        broadcast_observations=broadcast_obs, broadcast_init=broadcast_init,
        cameras_init=cameras_init)
