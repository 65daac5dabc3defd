"""Per-frame calibration of a moving, zooming broadcast camera.

A broadcast feed is one physical camera on a fixed mount: it pans and zooms
continuously, so a clip shares a single camera center C while focal length,
principal point, distortion and orientation move every frame.  Starting from
a rough per-frame init (the stand-in for a commercial calibration tool's
output), two kinds of evidence are pulled into agreement:

  * field evidence - projected template markings vs their detected pixels,
  * player evidence - projected 3D player keypoints (from the multi-view
    reconstruction) vs 2D detections in the broadcast frame, associated by
    appearance-free bipartite matching (box overlap x bone direction).

Both terms run through a saturating robust kernel so stray detections cannot
take over a frame.  The objective is optimized in the solver's first-order
(Adam) mode rather than with Levenberg-Marquardt: player matching re-forms
the objective mid-flight (recomputed every ``rematch_every`` iterations), and
small uniform steps keep the per-frame parameter sequences smooth, which
matters more here than terminal convergence rate.  Optional extras: a
first-difference smoothness penalty across frames (focal, principal,
distortion) and a flow term tying tracked field pixels to their template
points, pre-filtered with a modified z-score outlier gate.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field as _field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Camera, project_jacobians, quat_normalize, quat_to_matrix, skew
from .mocap import Detection2D
from .skeleton import COCO_TREE
from .solver import (DivergenceDetected, LeastSquaresProblem, RobustKernel,
                     SolveConfig, solve_least_squares)

__all__ = [
    "BroadcastSequence", "FrameObservations", "MatchResult", "BroadcastWeights",
    "match_players", "calibrate_clip", "reproject_overlay",
    "MissingInit", "FrameOutOfRange", "DivergenceDetected",
    "read_broadcast_json", "write_broadcast_json",
    "read_observations_jsonl", "write_observations_jsonl",
]


class MissingInit(ValueError):
    """Broadcast calibration needs a per-frame initial sequence to refine."""


class FrameOutOfRange(IndexError):
    """Requested frame index outside the clip."""


# Adam's per-coordinate step magnitude is roughly learning_rate x scale, so
# these put one step near the precision floor of each quantity: a 2000
# iteration budget can cross the expected init error (degrees of rotation,
# percent-level focal) and still settle inside sub-tolerance oscillation.
FIRST_ORDER_SCALES = {
    "f": 1000.0,  # px    (~1 px / step)
    "c": 10.0,    # px    (~0.01 px / step)
    "k": 0.01,    #       (~1e-5 / step)
    "q": 0.3,     # rad   (~0.017 deg / step)
    "C": 0.1,     # m     (~0.1 mm / step)
}
# The principal point moves an order slower than its pixel peers: a pure
# rotation is image translation to first order, so a fast-moving c_b absorbs
# rotation error into a joint drift the data can only reject at wide FOV.
# Slowing c_b keeps that valley pinned while still allowing the few-pixel
# wander real zoom lenses exhibit.


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class BroadcastSequence:
    """Shared-center, per-frame-everything calibration of one clip."""

    clip: str
    center: np.ndarray              # (3,) camera center C, meters, world
    focal: np.ndarray               # (F,) focal length, px, fx = fy
    principal: np.ndarray           # (F, 2) px
    dist: np.ndarray                # (F, 3) radial k1..k3
    rotation_quat_wxyz: np.ndarray  # (F, 4) unit rows, world-to-camera
    image_size: tuple = (1920, 1080)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.focal = np.atleast_1d(np.asarray(self.focal, dtype=float))
        n = self.focal.size
        self.principal = np.asarray(self.principal, dtype=float).reshape(n, 2)
        self.dist = np.asarray(self.dist, dtype=float).reshape(n, 3)
        q = np.asarray(self.rotation_quat_wxyz, dtype=float).reshape(n, 4)
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(
                f"frame {bad}: rotation quaternion norm {norms[bad]:.6g}")
        self.rotation_quat_wxyz = q / norms[:, None]
        if np.any(self.focal <= 0):
            raise ValueError("focal lengths must be positive")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def n_frames(self):
        return self.focal.size

    def camera(self, frame):
        """Assemble the full Camera for one frame (t = -R C)."""
        if not 0 <= frame < self.n_frames:
            raise FrameOutOfRange(
                f"frame {frame} outside clip of {self.n_frames} frames")
        R = quat_to_matrix(self.rotation_quat_wxyz[frame])
        return Camera(
            name=f"{self.clip}[{frame}]",
            image_size=self.image_size,
            focal=(self.focal[frame], self.focal[frame]),
            principal=self.principal[frame],
            dist=self.dist[frame],
            rotation_quat_wxyz=self.rotation_quat_wxyz[frame],
            translation=-R @ self.center,
        )

    def to_dict(self):
        return {
            "v": 1,
            "clip": self.clip,
            "image_size": [self.image_size[0], self.image_size[1]],
            "C": [float(v) for v in self.center],
            "frames": [
                {
                    "f": float(self.focal[t]),
                    "principal": [float(v) for v in self.principal[t]],
                    "k": [float(v) for v in self.dist[t]],
                    "rotation_quat_wxyz":
                        [float(v) for v in self.rotation_quat_wxyz[t]],
                }
                for t in range(self.n_frames)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        frames = d["frames"]
        return cls(
            clip=d["clip"],
            center=d["C"],
            focal=[fr["f"] for fr in frames],
            principal=[fr["principal"] for fr in frames],
            dist=[fr["k"] for fr in frames],
            rotation_quat_wxyz=[fr["rotation_quat_wxyz"] for fr in frames],
            image_size=tuple(d.get("image_size", (1920, 1080))),
        )


def write_broadcast_json(path, seq):
    with open(path, "w") as fp:
        json.dump(seq.to_dict(), fp, indent=1)


def read_broadcast_json(path):
    with open(path) as fp:
        return BroadcastSequence.from_dict(json.load(fp))


@dataclass
class FrameObservations:
    """Everything observed in one broadcast frame.

    Field and flow entries are (ref, pixel) pairs where ref is either a
    template point id (landmark or "polyline:NNN" vertex) or an explicit 3D
    point; player entries are Detection2D skeletons.
    """

    frame: int
    field_points: list = _field(default_factory=list)  # [(ref, (2,) px)]
    players: list = _field(default_factory=list)       # [Detection2D]
    flow: list = _field(default_factory=list)          # [(ref, (2,) px)]

    def __post_init__(self):
        self.frame = int(self.frame)
        self.field_points = [_norm_entry(e) for e in self.field_points]
        self.flow = [_norm_entry(e) for e in self.flow]

    def resolve_field(self, template):
        return _resolve_entries(self.field_points, template)

    def resolve_flow(self, template):
        return _resolve_entries(self.flow, template)

    def validate(self, image_size, margin=1.0):
        """Pixels must land inside the image (detections: confident joints)."""
        w, h = image_size
        pixels = [px for _, px in self.field_points + self.flow]
        for det in self.players:
            pixels.extend(det.joints[det.joints[:, 2] > 0, :2])
        for px in pixels:
            if not (-margin <= px[0] <= w - 1 + margin
                    and -margin <= px[1] <= h - 1 + margin):
                raise ValueError(
                    f"frame {self.frame}: pixel {px[0]:.1f},{px[1]:.1f} "
                    f"outside {w}x{h} image")

    def to_dict(self):
        d = {"frame": self.frame}
        if self.field_points:
            d["field"] = [_entry_dict(e) for e in self.field_points]
        if self.players:
            d["players"] = [det.to_dict() for det in self.players]
        if self.flow:
            d["flow"] = [_entry_dict(e) for e in self.flow]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            frame=d["frame"],
            field_points=[(e["ref"], e["px"]) for e in d.get("field", [])],
            players=[Detection2D.from_dict(p) for p in d.get("players", [])],
            flow=[(e["ref"], e["px"]) for e in d.get("flow", [])],
        )


def _norm_entry(entry):
    ref, px = entry
    if not isinstance(ref, str):
        ref = np.asarray(ref, dtype=float).reshape(3)
    return ref, np.asarray(px, dtype=float).reshape(2)


def _entry_dict(entry):
    ref, px = entry
    return {"ref": ref if isinstance(ref, str) else [float(v) for v in ref],
            "px": [float(px[0]), float(px[1])]}


def _resolve_entries(entries, template):
    """(ref, px) pairs -> (points (N,3), pixels (N,2))."""
    if not entries:
        return np.zeros((0, 3)), np.zeros((0, 2))
    lookup = None
    pts, pxs = [], []
    for ref, px in entries:
        if isinstance(ref, str):
            if template is None:
                raise ValueError("string point refs require a template")
            if lookup is None:
                ids, apts = template.all_points()
                lookup = dict(zip(ids, apts))
            if ref not in lookup:
                raise KeyError(f"unknown template point {ref!r}")
            pts.append(lookup[ref])
        else:
            pts.append(ref)
        pxs.append(px)
    return np.asarray(pts), np.asarray(pxs)


def write_observations_jsonl(path, observations):
    obs = sorted(observations, key=lambda fo: fo.frame)
    with open(path, "w") as fp:
        for fo in obs:
            fp.write(json.dumps(fo.to_dict()) + "\n")


def read_observations_jsonl(path):
    out = {}
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line:
                fo = FrameObservations.from_dict(json.loads(line))
                out[fo.frame] = fo
    return out


# ---------------------------------------------------------------------------
# player matching
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    """One-to-one assignment between projected 3D players and 2D detections."""

    pairs: list  # [(projected index, detection index, similarity)]
    n_projected: int = 0
    n_detections: int = 0

    def __post_init__(self):
        left = [i for i, _, _ in self.pairs]
        right = [j for _, j, _ in self.pairs]
        if len(set(left)) != len(left) or len(set(right)) != len(right):
            raise ValueError("assignment is not one-to-one")

    @property
    def assignment(self):
        return {i: j for i, j, _ in self.pairs}

    def total_similarity(self):
        return float(sum(s for _, _, s in self.pairs))


def _keypoints2d(obj):
    """Normalize a skeleton-ish object to (pixels (K,2), usable (K,) bool)."""
    if isinstance(obj, Detection2D):
        arr = obj.joints
    else:
        arr = np.asarray(obj, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("skeleton must have shape (K, 2) or (K, 3)")
    px = arr[:, :2]
    ok = np.all(np.isfinite(px), axis=1)
    if arr.shape[1] == 3:
        ok &= arr[:, 2] > 0
    return px, ok


def _tight_bbox(px, ok):
    pts = px[ok]
    if len(pts) == 0:
        return None
    return np.array([pts[:, 0].min(), pts[:, 1].min(),
                     pts[:, 0].max(), pts[:, 1].max()])


def _bbox_iou(a, b):
    if a is None or b is None:
        return 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def _bone_cosine(pa, oka, pb, okb, bones):
    """Mean cosine between corresponding 2D bone directions; no bones -> 0."""
    cos, count = 0.0, 0
    for i, j in bones:
        if not (oka[i] and oka[j] and okb[i] and okb[j]):
            continue
        da = pa[j] - pa[i]
        db = pb[j] - pb[i]
        na = np.linalg.norm(da)
        nb = np.linalg.norm(db)
        if na < 1e-9 or nb < 1e-9:
            continue
        cos += float(da @ db) / (na * nb)
        count += 1
    return cos / count if count else 0.0


def match_players(projected, detections, *, min_sim=0.3, bones=None):
    """Associate projected 3D skeletons with 2D detections in one frame.

    Similarity is the product of tight-keypoint-box IoU and mean bone
    direction cosine; the one-to-one assignment maximizes total similarity
    (Hungarian algorithm) and pairs below ``min_sim`` are dropped, so an
    empty result is possible and players may go unmatched.
    """
    bones = COCO_TREE if bones is None else bones
    proj = [_keypoints2d(p) for p in projected]
    dets = [_keypoints2d(d) for d in detections]
    if not proj or not dets:
        return MatchResult([], len(proj), len(dets))
    sim = np.zeros((len(proj), len(dets)))
    boxes_p = [_tight_bbox(px, ok) for px, ok in proj]
    boxes_d = [_tight_bbox(px, ok) for px, ok in dets]
    for i, (ppx, pok) in enumerate(proj):
        for j, (dpx, dok) in enumerate(dets):
            iou = _bbox_iou(boxes_p[i], boxes_d[j])
            if iou == 0.0:
                continue
            sim[i, j] = iou * _bone_cosine(ppx, pok, dpx, dok, bones)
    rows, cols = linear_sum_assignment(-sim)
    pairs = [(int(i), int(j), float(sim[i, j]))
             for i, j in zip(rows, cols) if sim[i, j] >= min_sim]
    return MatchResult(pairs, len(proj), len(dets))


# ---------------------------------------------------------------------------
# clip calibration
# ---------------------------------------------------------------------------

@dataclass
class BroadcastWeights:
    """Objective weights; smoothness and flow terms are off at 0."""

    field_weight: float = 1.0    # marking reprojection term
    player_weight: float = 0.5   # matched-player reprojection term
    sigma_field: float = 4.0     # px, robust kernel scale for markings
    sigma_player: float = 8.0    # px, robust kernel scale for players
    smooth_weight: float = 0.0   # first-difference penalty on f, c, k
    flow_weight: float = 0.0     # tracked field pixel term
    min_sim: float = 0.3         # matching acceptance threshold
    rematch_every: int = 100     # iterations between player re-associations


class _FrameEval:
    """One-slot memo of camera assembly + projection for one frame.

    All residual blocks of a frame see the same five parameter blocks and are
    evaluated at the same values several times per iteration (residual pass,
    jacobian pass, post-step cost).  Keying on the raw parameter bytes lets
    them share one projection without solver-side coordination.
    """

    def __init__(self, name, image_size, points):
        self.name = name
        self.image_size = image_size
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._key = None
        self._proj = None
        self._jkey = None
        self._jacs = None

    def _camera(self, f, c, k, q, C):
        q = quat_normalize(q)
        R = quat_to_matrix(q)
        return Camera(name=self.name, image_size=self.image_size,
                      focal=(f[0], f[0]), principal=c, dist=k,
                      rotation_quat_wxyz=q, translation=-R @ C)

    def project(self, f, c, k, q, C):
        key = (f.tobytes(), c.tobytes(), k.tobytes(), q.tobytes(), C.tobytes())
        if key != self._key:
            cam = self._camera(f, c, k, q, C)
            px, valid = cam.project_masked(self.points)
            self._key, self._proj = key, (cam, px, valid)
        return self._proj

    def jacobians(self, f, c, k, q, C):
        """Per-point jacobian stack for the frame's five blocks.

        Returns (valid, [J_f (N,2,1), J_c, J_k, J_q, J_C]) where the rotation
        jacobian is wrt a left axis-angle increment with the camera center
        held (the center block, not the translation, is the parameter).
        """
        key = (f.tobytes(), c.tobytes(), k.tobytes(), q.tobytes(), C.tobytes())
        if key != self._jkey:
            cam, _, valid = self.project(f, c, k, q, C)
            X = self.points
            if not np.all(valid):
                X = np.where(valid[:, None], X,
                             cam.center + cam.R.T @ [0.0, 0.0, 5.0])
            _, J = project_jacobians(cam, X)
            # t = -R C:  d(px)/d(rot) at fixed C picks up the rotation of t,
            # and d(px)/dC = d(px)/d(x_cam) . (-R) = -J_X.
            J_q = J["rot"] - np.einsum("nij,jk->nik", J["t"],
                                       skew(cam.translation))
            jacs = [J["f"].sum(axis=2, keepdims=True),  # fx = fy
                    J["c"], J["k"], J_q, -J["X"]]
            self._jkey, self._jacs = key, (valid, jacs)
        return self._jacs


def _projection_block(cache, sel, target):
    """Residual closure: rows Pi(points[sel]) - target, invalid rows zeroed."""
    idx = np.asarray(sel)
    n = idx.size

    def fn(f, c, k, q, C):
        _, px, valid = cache.project(f, c, k, q, C)
        ok = valid[idx]
        r = np.where(ok[:, None], px[idx] - target, 0.0)
        return r.reshape(-1)

    def jac(f, c, k, q, C):
        valid, jacs = cache.jacobians(f, c, k, q, C)
        keep = valid[idx][:, None, None]
        return [np.where(keep, J[idx], 0.0).reshape(2 * n, -1) for J in jacs]

    return fn, jac, 2 * n


class _PlayerTerm:
    """Mutable matching state + targets for one frame's player block."""

    def __init__(self, joints3d, valid3d, detections):
        self.joints3d = joints3d            # (P, K, 3)
        self.valid3d = valid3d              # (P, K) bool
        self.detections = detections        # [Detection2D]
        p, k = valid3d.shape
        self.n_rows = p * k
        self.assignment = {}
        self.target = np.zeros((self.n_rows, 2))
        self.mask = np.zeros(self.n_rows, dtype=bool)

    def set_assignment(self, assignment):
        self.assignment = dict(assignment)
        self.target = np.zeros((self.n_rows, 2))
        self.mask = np.zeros(self.n_rows, dtype=bool)
        k = self.valid3d.shape[1]
        for slot, det_idx in self.assignment.items():
            joints = self.detections[det_idx].joints
            rows = slice(slot * k, (slot + 1) * k)
            ok = self.valid3d[slot] & (joints[:, 2] > 0)
            self.target[rows] = np.where(ok[:, None], joints[:, :2], 0.0)
            self.mask[rows] = ok

    def rematch(self, px, valid, min_sim):
        """Re-associate from current projections; True if assignment moved."""
        p, k = self.valid3d.shape
        proj = px.reshape(p, k, 2).copy()
        proj[~(valid.reshape(p, k) & self.valid3d)] = np.nan
        result = match_players(list(proj), self.detections, min_sim=min_sim)
        if result.assignment != self.assignment:
            self.set_assignment(result.assignment)
            return True
        return False


def _players_by_frame(tracks):
    """Normalize tracks to frame -> sorted [(id, joints (K,3), valid (K,))]."""
    out = defaultdict(list)
    if tracks is None:
        return out
    if isinstance(tracks, dict):
        for f, skels in tracks.items():
            for i, jt in enumerate(skels):
                jt = np.asarray(jt, dtype=float)
                out[int(f)].append((i, jt, np.all(np.isfinite(jt), axis=1)))
    else:
        for tr in tracks:
            for f in tr.frames():
                pose = tr.poses[f]
                out[int(f)].append((tr.id, pose.joints, pose.valid))
    for f in out:
        out[f].sort(key=lambda item: item[0])
    return out


def _first_difference_block(problem, name_a, name_b, size, weight, label):
    eye = np.eye(size)

    def fn(a, b):
        return b - a

    def jac(a, b):
        return [-eye, eye]

    problem.add_residual_block(fn, [name_a, name_b], size, jac=jac,
                               weight=weight, name=label)


def _modified_z_keep(norms):
    """Modified z-score gate: keep |z| <= 3.5; degenerate spread keeps all."""
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    if mad < 1e-12:
        return np.ones(len(norms), dtype=bool)
    z = 0.6745 * (norms - med) / mad
    return np.abs(z) <= 3.5


def calibrate_clip(init, observations, tracks=None, template=None,
                   weights=None, *, config=None, freeze_center=False):
    """Refine a whole clip's calibration against field and player evidence.

    Every frame contributes its own focal/principal/distortion/rotation
    blocks; the camera center block is shared across the clip (a broadcast
    camera sits on a fixed mount) and estimated unless ``freeze_center``.
    Optimization is plain Adam over the robustified reprojection objective -
    matching between projected tracks and player detections is refreshed
    every ``weights.rematch_every`` iterations, which re-forms the objective,
    so second-order steps would chase a moving target.  Frames without
    observations keep their init values (their gradient is identically zero);
    with ``player_weight`` = 0 and no smoothness term, frames are coupled
    only through the shared center.

    Returns (BroadcastSequence, SolveReport).  Raises MissingInit when no
    init is given or observations fall outside it, DivergenceDetected when
    the cost rises for ``divergence_patience`` consecutive iterations.
    """
    if init is None:
        raise MissingInit("broadcast calibration requires an init sequence")
    weights = weights or BroadcastWeights()

    if isinstance(observations, dict):
        obs = {int(f): fo for f, fo in observations.items()}
    else:
        obs = {fo.frame: fo for fo in observations}
    for t, fo in sorted(obs.items()):
        if not 0 <= t < init.n_frames:
            raise MissingInit(
                f"frame {t} has observations but the init covers only "
                f"{init.n_frames} frames")
        fo.validate(init.image_size)

    players = _players_by_frame(tracks)

    # Flow entries are gated once, against the init calibration, with a
    # modified z-score on the residual norms pooled over the whole clip.
    flow_kept = {}
    if weights.flow_weight > 0:
        entries, norms = [], []
        for t, fo in sorted(obs.items()):
            X, px = fo.resolve_flow(template)
            if len(X) == 0:
                continue
            ppx, valid = init.camera(t).project_masked(X)
            r = np.where(valid, np.linalg.norm(ppx - px, axis=1), np.inf)
            entries.append((t, X, px))
            norms.append(r)
        if entries:
            keep = _modified_z_keep(np.concatenate(norms))
            at = 0
            for (t, X, px), r in zip(entries, norms):
                m = keep[at:at + len(X)] & np.isfinite(r)
                at += len(X)
                if np.any(m):
                    flow_kept[t] = (X[m], px[m])

    problem = LeastSquaresProblem()
    problem.add_parameter_block("C", init.center.copy(),
                                frozen=freeze_center,
                                scale=FIRST_ORDER_SCALES["C"])
    for t in range(init.n_frames):
        problem.add_parameter_block(f"{t}/f", np.array([init.focal[t]]),
                                    scale=FIRST_ORDER_SCALES["f"])
        problem.add_parameter_block(f"{t}/c", init.principal[t].copy(),
                                    scale=FIRST_ORDER_SCALES["c"])
        problem.add_parameter_block(f"{t}/k", init.dist[t].copy(),
                                    scale=FIRST_ORDER_SCALES["k"])
        problem.add_parameter_block(f"{t}/q", init.rotation_quat_wxyz[t].copy(),
                                    manifold="quaternion",
                                    scale=FIRST_ORDER_SCALES["q"])

    rematch_terms = []  # (cache, term, block names, player slice)
    n_blocks = 0
    for t in sorted(obs):
        fo = obs[t]
        names = [f"{t}/f", f"{t}/c", f"{t}/k", f"{t}/q", "C"]
        X_field, px_field = fo.resolve_field(template)
        present = players.get(t, []) if weights.player_weight > 0 else []
        if present and fo.players:
            joints3d = np.stack([j for _, j, _ in present])
            valid3d = np.stack([v for _, _, v in present])
        else:
            joints3d = np.zeros((0, 0, 3))
        Xf, pxf = flow_kept.get(t, (np.zeros((0, 3)), np.zeros((0, 2))))

        stacked = np.concatenate([X_field, joints3d.reshape(-1, 3), Xf])
        if len(stacked) == 0:
            continue
        cache = _FrameEval(f"{init.clip}[{t}]", init.image_size, stacked)
        nf = len(X_field)
        npl = joints3d.shape[0] * joints3d.shape[1] if joints3d.size else 0

        if nf:
            fn, jac, dim = _projection_block(cache, np.arange(nf), px_field)
            problem.add_residual_block(
                fn, names, dim, jac=jac,
                kernel=RobustKernel("geman_mcclure", weights.sigma_field),
                weight=weights.field_weight, chunk=2, name=f"field/{t}")
            n_blocks += 1
        if npl:
            term = _PlayerTerm(joints3d, valid3d, fo.players)
            sel = np.arange(nf, nf + npl)
            # target/mask are read through the term object at call time so a
            # matching update re-forms this block's residual in place
            fn_t, jac_t = _bind_player(cache, sel, term)
            problem.add_residual_block(
                fn_t, names, 2 * npl, jac=jac_t,
                kernel=RobustKernel("geman_mcclure", weights.sigma_player),
                weight=weights.player_weight, chunk=2, name=f"player/{t}")
            rematch_terms.append((cache, term, names, sel))
            n_blocks += 1
        if len(Xf):
            sel = np.arange(nf + npl, nf + npl + len(Xf))
            fn, jac, dim = _projection_block(cache, sel, pxf)
            problem.add_residual_block(fn, names, dim, jac=jac,
                                       weight=weights.flow_weight,
                                       name=f"flow/{t}")
            n_blocks += 1

    if weights.smooth_weight > 0:
        for t in range(init.n_frames - 1):
            _first_difference_block(problem, f"{t}/f", f"{t + 1}/f", 1,
                                    weights.smooth_weight, f"smooth/f/{t}")
            _first_difference_block(problem, f"{t}/c", f"{t + 1}/c", 2,
                                    weights.smooth_weight, f"smooth/c/{t}")
            _first_difference_block(problem, f"{t}/k", f"{t + 1}/k", 3,
                                    weights.smooth_weight, f"smooth/k/{t}")

    if n_blocks == 0:
        raise ValueError("no usable observations in any frame of the clip")

    def do_rematch():
        changed = False
        for cache, term, names, sel in rematch_terms:
            vals = [problem.values(n) for n in names]
            _, px, valid = cache.project(*vals)
            if term.rematch(px[sel], valid[sel], weights.min_sim):
                changed = True
        return changed

    do_rematch()  # initial association, from the init calibration

    base = config or SolveConfig()
    user_cb = base.iteration_callback

    def callback(iteration):
        changed = False
        if (rematch_terms and iteration > 0
                and iteration % weights.rematch_every == 0):
            changed = do_rematch()
        if user_cb is not None:
            changed = bool(user_cb(iteration)) or changed
        return changed

    cfg = replace(base, mode="first_order", iteration_callback=callback)
    report = solve_least_squares(problem, cfg)

    result = BroadcastSequence(
        clip=init.clip,
        center=problem.values("C").copy(),
        focal=np.array([problem.values(f"{t}/f")[0]
                        for t in range(init.n_frames)]),
        principal=np.stack([problem.values(f"{t}/c")
                            for t in range(init.n_frames)]),
        dist=np.stack([problem.values(f"{t}/k")
                       for t in range(init.n_frames)]),
        rotation_quat_wxyz=np.stack([problem.values(f"{t}/q")
                                     for t in range(init.n_frames)]),
        image_size=init.image_size,
    )
    return result, report


def _bind_player(cache, sel, term):
    """Player residual closures that read the term's current matching."""
    idx = np.asarray(sel)
    n = idx.size

    def fn(f, c, k, q, C):
        _, px, valid = cache.project(f, c, k, q, C)
        ok = valid[idx] & term.mask
        r = np.where(ok[:, None], px[idx] - term.target, 0.0)
        return r.reshape(-1)

    def jac(f, c, k, q, C):
        valid, jacs = cache.jacobians(f, c, k, q, C)
        ok = valid[idx] & term.mask
        keep = ok[:, None, None]
        return [np.where(keep, J[idx], 0.0).reshape(2 * n, -1) for J in jacs]

    return fn, jac


# ---------------------------------------------------------------------------
# overlay reprojection
# ---------------------------------------------------------------------------

def _densify(pts, spacing):
    """Subdivide polyline segments to at most `spacing` apart (3D)."""
    out = [pts[:1]]
    for s in range(len(pts) - 1):
        a, b = pts[s], pts[s + 1]
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        ts = (np.arange(1, n + 1) / n)[:, None]
        out.append(a[None] + ts * (b - a)[None])
    return np.concatenate(out)


def _clip_segment(p, q, w, h):
    """Liang-Barsky clip of segment p->q to [0, w-1] x [0, h-1], or None."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for axis, hi in ((0, w - 1.0), (1, h - 1.0)):
        if abs(d[axis]) < 1e-12:
            if p[axis] < 0.0 or p[axis] > hi:
                return None
            continue
        ta = (0.0 - p[axis]) / d[axis]
        tb = (hi - p[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    a = p if t0 == 0.0 else p + t0 * d
    b = q if t1 == 1.0 else p + t1 * d
    return a, b


def _clip_polyline(px, valid, image_size):
    """Visible runs of a projected polyline, split at exits and invalid points."""
    w, h = image_size
    runs, cur = [], []
    for s in range(len(px) - 1):
        if not (valid[s] and valid[s + 1]):
            if len(cur) >= 2:
                runs.append(np.asarray(cur))
            cur = []
            continue
        seg = _clip_segment(px[s], px[s + 1], w, h)
        if seg is None:
            if len(cur) >= 2:
                runs.append(np.asarray(cur))
            cur = []
            continue
        a, b = seg
        if not cur or not np.array_equal(cur[-1], a):
            if len(cur) >= 2:
                runs.append(np.asarray(cur))
            cur = [a]
        cur.append(b)
    if len(cur) >= 2:
        runs.append(np.asarray(cur))
    return runs


def reproject_overlay(seq, template, tracks, frame, *, spacing=0.5,
                      bones=None):
    """Project field markings and player skeletons into one broadcast frame.

    Polylines are densified in 3D (distortion bends straight lines), projected
    and clipped to the image; a marking fully out of view contributes nothing.
    Skeleton joints are returned unclipped (NaN where invalid or behind the
    camera) so a consumer can draw partially visible players.
    """
    if not 0 <= frame < seq.n_frames:
        raise FrameOutOfRange(
            f"frame {frame} outside clip of {seq.n_frames} frames")
    cam = seq.camera(frame)

    polylines = []
    for pid, pts in (template.polylines if template is not None else []):
        dense = _densify(pts, spacing)
        px, valid = cam.project_masked(dense)
        for i, run in enumerate(_clip_polyline(px, valid, seq.image_size)):
            polylines.append({"id": pid if i == 0 else f"{pid}#{i}",
                              "points": run})

    skeletons = []
    for tid, joints, valid3d in _players_by_frame(tracks).get(int(frame), []):
        px, ok = cam.project_masked(joints)
        ok = ok & valid3d
        px = np.where(ok[:, None], px, np.nan)
        skeletons.append({"track": tid, "joints": px, "valid": ok})

    return {
        "frame": int(frame),
        "image_size": [seq.image_size[0], seq.image_size[1]],
        "polylines": polylines,
        "skeletons": skeletons,
        "bones": [list(b) for b in (COCO_TREE if bones is None else bones)],
    }
