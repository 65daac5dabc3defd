"""Joint-space parametric body model and three-phase track fitting.

The model mirrors the SMPL parameter layout — root orientation, per-joint
axis-angle body pose, translation, 10-dim shape — but lives purely in joint
space: shape blends displace rest joints, forward kinematics poses them, and a
row-stochastic regressor maps body joints onto the 17-keypoint detection
skeleton.  Mesh skinning is deliberately absent; the model file format
reserves room for vertex data so converted mesh weights can ride along later.

Fitting one track runs in three phases (see fit_track):
  1. solve_shape     closed-form bone-length fit of the shape vector
  2. align_root      per-frame rigid placement from hip/shoulder anchors
  3. refine_sequence joint LM refinement of every parameter across the whole
                     sequence: hip-anchored reprojection data term,
                     second-difference smoothness, shape regularization.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .geometry import NonPositiveDepth, project_jacobians
from .skeleton import COCO_TREE, LEFT_HIP, N_JOINTS, RIGHT_HIP, TORSO_JOINTS
from .solver import (LeastSquaresProblem, SolveConfig, SolveReport,
                     solve_least_squares)

BEHIND_CAMERA_RESIDUAL = 1e4


class RankDeficient(UserWarning):
    """Bone-length system has fewer independent bones than shape directions."""


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class BodyModel:
    """Kinematic tree + shaped rest joints + keypoint regressor.

    parents: (J,) int, parents[0] == -1, parents[j] < j.
    template: (J, 3) rest joints, pelvis at the origin, z up, facing +x.
    blend: (S, J, 3) per-unit shape displacement of every rest joint.
    regressor: (K, J) row-stochastic map from body joints to keypoints.
    bones: (K-1) keypoint-index pairs, a spanning tree for bone lengths.
    """

    parents: np.ndarray
    template: np.ndarray
    blend: np.ndarray
    regressor: np.ndarray
    bones: list
    vertex_template: object = None   # reserved for mesh-weight converters
    vertex_regressor: object = None

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.template = np.asarray(self.template, dtype=float)
        self.blend = np.asarray(self.blend, dtype=float)
        self.regressor = np.asarray(self.regressor, dtype=float)
        self.bones = [(int(a), int(b)) for a, b in self.bones]

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_shapes(self):
        return self.blend.shape[0]

    @property
    def n_keypoints(self):
        return self.regressor.shape[0]

    def validate(self):
        J = self.n_joints
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise ValueError("tree must have exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("parents must precede children (parents[j] < j)")
        if self.template.shape != (J, 3):
            raise ValueError(f"template must be ({J}, 3)")
        if self.blend.shape[1:] != (J, 3):
            raise ValueError(f"blend must be (S, {J}, 3)")
        if self.regressor.shape[1] != J:
            raise ValueError(f"regressor must be (K, {J})")
        sums = self.regressor.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9 or self.regressor.min() < 0:
            raise ValueError("regressor rows must be nonnegative and sum to 1")
        K = self.n_keypoints
        if len(self.bones) != K - 1:
            raise ValueError(f"bone list must have K-1 = {K - 1} pairs")
        for a, b in self.bones:
            if not (0 <= a < K and 0 <= b < K) or a == b:
                raise ValueError(f"bad bone pair ({a}, {b})")
        if bone_lengths(self.keypoint_template(), self.bones).min() <= 0:
            raise ValueError("template bone lengths must be positive")

    def keypoint_template(self):
        return self.regressor @ self.template

    def children(self):
        out = [[] for _ in range(self.n_joints)]
        for j, p in enumerate(self.parents):
            if p >= 0:
                out[p].append(j)
        return out

    def descendants(self):
        """Strict descendants of every joint as index arrays, cached.

        The FK jacobian walks this for every joint on every evaluation, so
        the tree is flattened once per model instead of per call.
        """
        cached = getattr(self, "_descendants", None)
        if cached is None:
            kids = self.children()
            lists = [[] for _ in range(self.n_joints)]
            for j in range(self.n_joints - 1, -1, -1):
                for c in kids[j]:
                    lists[j].append(c)
                    lists[j].extend(lists[c])
            cached = [np.array(sorted(d), dtype=int) for d in lists]
            self._descendants = cached
        return cached


@dataclass
class BodyParams:
    """Per-frame body state: root orientation, body pose, translation, shape."""

    theta_r: np.ndarray  # (3,) axis-angle
    theta_b: np.ndarray  # (3*(J-1),) axis-angle per non-root joint
    t: np.ndarray        # (3,) m
    beta: np.ndarray     # (S,) shape

    def __post_init__(self):
        self.theta_r = np.asarray(self.theta_r, dtype=float).reshape(3)
        self.theta_b = np.asarray(self.theta_b, dtype=float).reshape(-1)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)

    def validate(self, model=None):
        for name in ("theta_r", "theta_b", "t", "beta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if model is not None:
            if self.theta_b.size != 3 * (model.n_joints - 1):
                raise ValueError("theta_b size does not match the model tree")
            if self.beta.size != model.n_shapes:
                raise ValueError("beta size does not match the model blends")

    def canonicalized(self):
        th_b = np.concatenate([canonical_axis_angle(v)
                               for v in self.theta_b.reshape(-1, 3)])
        return BodyParams(canonical_axis_angle(self.theta_r), th_b,
                          self.t.copy(), self.beta.copy())


def zero_params(model):
    return BodyParams(np.zeros(3), np.zeros(3 * (model.n_joints - 1)),
                      np.zeros(3), np.zeros(model.n_shapes))


def canonical_axis_angle(v):
    """Wrap an axis-angle vector so its magnitude lies in [0, pi]."""
    v = np.asarray(v, dtype=float).reshape(3)
    n = float(np.linalg.norm(v))
    if n <= np.pi:
        return v.copy()
    wrapped = np.mod(n, 2.0 * np.pi)
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi
    return v * (wrapped / n)


def bone_lengths(points, bones):
    points = np.asarray(points, dtype=float)
    idx = np.asarray(bones, dtype=int)
    return np.linalg.norm(points[idx[:, 1]] - points[idx[:, 0]], axis=1)


# ---------------------------------------------------------------------------
# default model
# ---------------------------------------------------------------------------

def default_body_model():
    """24-joint body with 10 shape directions and a COCO-17 regressor.

    Proportions are an average adult; shape directions are interpretable
    (stature, limb lengths/ratios, widths, head/neck) and all visible in
    keypoint bone-length space so the shape solve is full rank.
    """
    parents = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8,
               9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
    # pelvis, l/r hip, spine1, l/r knee, spine2, l/r ankle, spine3,
    # l/r foot, neck, l/r collar, head, l/r shoulder, elbow, wrist, hand
    template = np.array([
        (0.00, 0.000, 0.00),
        (0.00, 0.095, -0.06), (0.00, -0.095, -0.06), (0.00, 0.000, 0.11),
        (0.00, 0.100, -0.48), (0.00, -0.100, -0.48), (0.00, 0.000, 0.24),
        (0.00, 0.105, -0.88), (0.00, -0.105, -0.88), (0.00, 0.000, 0.37),
        (0.12, 0.105, -0.94), (0.12, -0.105, -0.94), (0.00, 0.000, 0.50),
        (0.00, 0.070, 0.46), (0.00, -0.070, 0.46), (0.00, 0.000, 0.62),
        (0.00, 0.170, 0.50), (0.00, -0.170, 0.50),
        (0.00, 0.440, 0.50), (0.00, -0.440, 0.50),
        (0.00, 0.700, 0.50), (0.00, -0.700, 0.50),
        (0.00, 0.790, 0.50), (0.00, -0.790, 0.50),
    ])
    L = dict(l_hip=1, r_hip=2, l_knee=4, r_knee=5, l_ankle=7, r_ankle=8,
             l_foot=10, r_foot=11, neck=12, l_collar=13, r_collar=14,
             head=15, l_shoulder=16, r_shoulder=17, l_elbow=18, r_elbow=19,
             l_wrist=20, r_wrist=21, l_hand=22, r_hand=23)
    blend = np.zeros((10, 24, 3))
    blend[0] = 0.06 * template                     # stature
    for side in ("l", "r"):                        # leg length
        blend[1, L[f"{side}_knee"], 2] = -0.03
        for j in (f"{side}_ankle", f"{side}_foot"):
            blend[1, L[j], 2] = -0.06
    for sgn, side in ((1.0, "l"), (-1.0, "r")):    # arm length
        blend[2, L[f"{side}_elbow"], 1] = sgn * 0.025
        blend[2, L[f"{side}_wrist"], 1] = sgn * 0.050
        blend[2, L[f"{side}_hand"], 1] = sgn * 0.055
    # Lateral (width) offsets stay small: they act perpendicular to the long
    # torso bones, so their quadratic contribution to bone lengths must stay
    # well below the linear terms for the shape solve to round-trip cleanly.
    for sgn, side in ((1.0, "l"), (-1.0, "r")):    # shoulder width
        for j in ("shoulder", "elbow", "wrist", "hand"):
            blend[3, L[f"{side}_{j}"], 1] = sgn * 0.012
    for sgn, side in ((1.0, "l"), (-1.0, "r")):    # hip width
        for j in ("hip", "knee", "ankle", "foot"):
            blend[4, L[f"{side}_{j}"], 1] = sgn * 0.010
    blend[5, 3, 2] = 0.01                           # torso length
    blend[5, 6, 2] = 0.02
    blend[5, 9, 2] = 0.03
    for j in ("neck", "l_collar", "r_collar", "head", "l_shoulder",
              "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
              "l_hand", "r_hand"):
        blend[5, L[j], 2] = 0.04
    blend[6, L["head"], 2] = 0.02                   # head size
    for sgn, side in ((1.0, "l"), (-1.0, "r")):    # upper-arm/forearm ratio
        blend[7, L[f"{side}_elbow"], 1] = sgn * 0.02
    for side in ("l", "r"):                        # shoulder drop (slope)
        for j in ("shoulder", "elbow", "wrist", "hand"):
            blend[8, L[f"{side}_{j}"], 2] = -0.012
    for side in ("l", "r"):                        # thigh/shin ratio
        blend[9, L[f"{side}_knee"], 2] = -0.02
    # COCO keypoints from body joints; eyes/ears mix head, neck and collar so
    # every head bone has positive template length and lateral offsets.
    regressor = np.zeros((N_JOINTS, 24))
    regressor[0, L["head"]] = 1.0
    for k, side in ((1, "l"), (2, "r")):
        regressor[k, L["head"]] = 0.70
        regressor[k, L["neck"]] = 0.15
        regressor[k, L[f"{side}_collar"]] = 0.15
    for k, side in ((3, "l"), (4, "r")):
        regressor[k, L["head"]] = 0.55
        regressor[k, L["neck"]] = 0.15
        regressor[k, L[f"{side}_collar"]] = 0.30
    for k, j in ((5, "l_shoulder"), (6, "r_shoulder"), (7, "l_elbow"),
                 (8, "r_elbow"), (9, "l_wrist"), (10, "r_wrist"),
                 (11, "l_hip"), (12, "r_hip"), (13, "l_knee"), (14, "r_knee"),
                 (15, "l_ankle"), (16, "r_ankle")):
        regressor[k, L[j]] = 1.0
    model = BodyModel(parents=parents, template=template, blend=blend,
                      regressor=regressor, bones=list(COCO_TREE))
    model.validate()
    return model


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


_GENERATORS = np.stack([_skew(e) for e in np.eye(3)])
_GENERATORS.setflags(write=False)
_EYE3 = np.eye(3)
_EYE3.setflags(write=False)


def _rot3(v):
    """rodrigues() without the framework overhead; FK calls this in a loop."""
    x, y, z = v
    n2 = x * x + y * y + z * z
    if n2 < 1e-24:
        return np.array([[1.0, -z, y],
                         [z, 1.0, -x],
                         [-y, x, 1.0]])
    n = math.sqrt(n2)
    c = math.cos(n)
    s = math.sin(n) / n
    t = (1.0 - c) / n2
    sx, sy, sz = s * x, s * y, s * z
    txy, txz, tyz = t * x * y, t * x * z, t * y * z
    return np.array([
        [c + t * x * x, txy - sz, txz + sy],
        [txy + sz, c + t * y * y, tyz - sx],
        [txz - sy, tyz + sx, c + t * z * z],
    ])


def _rodrigues_partials(theta):
    """R(theta) and exact partials dR/dtheta_i, stacked as (3, 3, 3).

    Column i of W below is theta_i * theta + theta x ((I - R) e_i); the
    partial for component i is skew(W[:, i]) R / |theta|^2.
    """
    theta = np.asarray(theta, dtype=float).reshape(3)
    n2 = float(theta @ theta)
    R = _rot3(theta)
    if n2 < 1e-16:
        return R, _GENERATORS
    W = np.outer(theta, theta) + _skew(theta) @ (_EYE3 - R)
    wx, wy, wz = W
    S = np.zeros((3, 3, 3))
    S[:, 0, 1] = -wz
    S[:, 0, 2] = wy
    S[:, 1, 0] = wz
    S[:, 1, 2] = -wx
    S[:, 2, 0] = -wy
    S[:, 2, 1] = wx
    return R, S @ (R / n2)


def _rot3_batch(th):
    """_rot3 over a stack of axis-angle rows: (N, 3) -> (N, 3, 3)."""
    th = np.asarray(th, dtype=float)
    n2 = np.einsum("nc,nc->n", th, th)
    small = n2 < 1e-24
    safe = np.where(small, 1.0, n2)
    n = np.sqrt(safe)
    c = np.where(small, 1.0, np.cos(n))
    s = np.where(small, 1.0, np.sin(n) / n)
    t = np.where(small, 0.0, (1.0 - c) / safe)
    R = t[:, None, None] * th[:, :, None] * th[:, None, :]
    R += c[:, None, None] * _EYE3
    sx, sy, sz = s * th[:, 0], s * th[:, 1], s * th[:, 2]
    R[:, 0, 1] -= sz
    R[:, 0, 2] += sy
    R[:, 1, 0] += sz
    R[:, 1, 2] -= sx
    R[:, 2, 0] -= sy
    R[:, 2, 1] += sx
    return R


def _partials_batch(th, R):
    """_rodrigues_partials over a stack: (N, 3) + (N, 3, 3) -> (N, 3, 3, 3)."""
    th = np.asarray(th, dtype=float)
    N = len(th)
    n2 = np.einsum("nc,nc->n", th, th)
    small = n2 < 1e-16
    K = np.zeros((N, 3, 3))
    x, y, z = th[:, 0], th[:, 1], th[:, 2]
    K[:, 0, 1] = -z
    K[:, 0, 2] = y
    K[:, 1, 0] = z
    K[:, 1, 2] = -x
    K[:, 2, 0] = -y
    K[:, 2, 1] = x
    W = th[:, :, None] * th[:, None, :] + K @ (_EYE3 - R)
    wx, wy, wz = W[:, 0, :], W[:, 1, :], W[:, 2, :]
    S = np.zeros((N, 3, 3, 3))
    S[:, :, 0, 1] = -wz
    S[:, :, 0, 2] = wy
    S[:, :, 1, 0] = wz
    S[:, :, 1, 2] = -wx
    S[:, :, 2, 0] = -wy
    S[:, :, 2, 1] = wx
    parts = S @ (R / np.where(small, 1.0, n2)[:, None, None])[:, None, :, :]
    parts[small] = _GENERATORS
    return parts


def forward(model, params):
    """Pose the body.  Returns (body joints (J,3), keypoints (K,3))."""
    body = _fk_positions(model, params)[0]
    return body, model.regressor @ body


def _fk_positions(model, params):
    """Body-frame FK then root orientation + translation.

    Returns (world joints, body-frame joints, per-joint global rotations in
    the body frame, root rotation matrix).
    """
    J = model.n_joints
    rest = model.template + np.einsum("s,sjc->jc", params.beta, model.blend)
    G = np.empty((J, 3, 3))
    p = np.empty((J, 3))
    G[0] = np.eye(3)
    p[0] = rest[0]
    Rl = _rot3_batch(params.theta_b.reshape(-1, 3))
    for j in range(1, J):
        par = model.parents[j]
        G[j] = G[par] @ Rl[j - 1]
        p[j] = p[par] + G[par] @ (rest[j] - rest[par])
    Rr = _rot3(params.theta_r)
    world = p @ Rr.T + params.t
    return world, p, G, Rr


def forward_with_jacobians(model, params):
    """FK plus keypoint derivatives for every parameter group.

    Returns (body joints, keypoints, jac) with jac a dict of arrays:
      "theta_r" (K,3,3), "theta_b" (K,3,3*(J-1)), "t" (K,3,3),
      "beta" (K,3,S).
    """
    J, S = model.n_joints, model.n_shapes
    rest = model.template + np.einsum("s,sjc->jc", params.beta, model.blend)
    th = params.theta_b.reshape(-1, 3)
    G = np.empty((J, 3, 3))
    p = np.empty((J, 3))
    dp_beta = np.zeros((J, 3, S))
    G[0] = np.eye(3)
    p[0] = rest[0]
    dp_beta[0] = model.blend[:, 0, :].T
    Rl = _rot3_batch(th)
    for j in range(1, J):
        par = model.parents[j]
        G[j] = G[par] @ Rl[j - 1]
        off = rest[j] - rest[par]
        p[j] = p[par] + G[par] @ off
        d_off = (model.blend[:, j, :] - model.blend[:, par, :]).T  # (3,S)
        dp_beta[j] = dp_beta[par] + G[par] @ d_off

    dp_theta = np.zeros((J, 3, 3 * (J - 1)))
    desc_lists = model.descendants()
    parts = _partials_batch(th, Rl)
    for j in range(1, J):
        desc = desc_lists[j]  # rotating joint j moves its strict descendants
        if not len(desc):
            continue
        par = model.parents[j]
        rel = (p[desc] - p[j]) @ G[j]  # rows: (G_j^T (p_d - p_j))^T
        M = G[par] @ parts[j - 1]  # (3,3,3) over the three pose components
        c = 3 * (j - 1)
        dp_theta[desc, :, c:c + 3] = np.einsum("dc,ibc->dbi", rel, M)

    Rr, r_parts = _rodrigues_partials(params.theta_r)
    world = p @ Rr.T + params.t
    dworld_r = np.einsum("jc,ibc->jbi", p, r_parts)  # (J,3,3)
    dworld_t = np.broadcast_to(np.eye(3), (J, 3, 3))
    dworld_beta = np.einsum("ab,jbs->jas", Rr, dp_beta)
    dworld_theta = np.einsum("ab,jbn->jan", Rr, dp_theta)

    reg = model.regressor
    jac = {
        "theta_r": np.einsum("kj,jan->kan", reg, dworld_r),
        "theta_b": np.einsum("kj,jan->kan", reg, dworld_theta),
        "t": np.einsum("kj,jan->kan", reg, dworld_t),
        "beta": np.einsum("kj,jan->kan", reg, dworld_beta),
    }
    return world, reg @ world, jac


# ---------------------------------------------------------------------------
# phase 1: shape from bone lengths
# ---------------------------------------------------------------------------

def shape_sensitivities(model):
    """(K-1, S) signed bone-length change per unit of each shape direction.

    Entry [b, i] is the regressed blend-offset difference across bone b
    projected onto the template bone direction (signed projection — the exact
    first derivative of bone length in the shape coordinates).
    """
    kp_template = model.keypoint_template()
    idx = np.asarray(model.bones, dtype=int)
    t_vec = kp_template[idx[:, 1]] - kp_template[idx[:, 0]]
    t_hat = t_vec / np.linalg.norm(t_vec, axis=1, keepdims=True)
    S = np.zeros((len(model.bones), model.n_shapes))
    for i in range(model.n_shapes):
        kp_blend = model.regressor @ model.blend[i]
        delta = kp_blend[idx[:, 1]] - kp_blend[idx[:, 0]]
        S[:, i] = np.einsum("bc,bc->b", delta, t_hat)
    return S


def solve_shape(model, poses, rcond=1e-4):
    """Estimate the shape vector from observed bone lengths.

    poses: one SkeletonPose or an iterable; a bone contributes in every frame
    where both endpoints are valid, averaged across frames.  Damped linear
    least squares (spectral cutoff at rcond times the largest singular value)
    against the blend sensitivities; RankDeficient is warned when the system
    has fewer independent bones than shape directions.
    """
    if hasattr(poses, "joints"):
        poses = [poses]
    poses = list(poses)
    if not poses:
        raise ValueError("solve_shape needs at least one pose")
    idx = np.asarray(model.bones, dtype=int)
    total = np.zeros(len(model.bones))
    count = np.zeros(len(model.bones), dtype=int)
    for pose in poses:
        ok = pose.valid[idx[:, 0]] & pose.valid[idx[:, 1]]
        seg = np.linalg.norm(pose.joints[idx[:, 1]] - pose.joints[idx[:, 0]],
                             axis=1)
        total[ok] += seg[ok]
        count[ok] += 1
    if np.any(count == 0):
        missing = [model.bones[b] for b in np.flatnonzero(count == 0)]
        raise ValueError(f"bones never measurable in any frame: {missing}")
    observed = total / count
    target = observed - bone_lengths(model.keypoint_template(), model.bones)
    S = shape_sensitivities(model)
    beta, _, rank, _ = np.linalg.lstsq(S, target, rcond=rcond)
    if rank < model.n_shapes:
        warnings.warn(
            f"bone-length system rank {rank} < {model.n_shapes} shape "
            f"directions; unobservable components left at zero",
            RankDeficient, stacklevel=2)
    return beta


# ---------------------------------------------------------------------------
# phase 2: root alignment
# ---------------------------------------------------------------------------

def align_root(model, params, target):
    """Rigid placement of the body onto a 3D pose via its torso keypoints.

    Minimizes the distance between model and observed {shoulders, hips} with
    theta_b and beta frozen.  Closed-form Kabsch gives the initialization; an
    LM polish absorbs the (generally nonzero) residual shape mismatch.
    Returns (theta_r, t).
    """
    anchors = [k for k in TORSO_JOINTS if target.valid[k]]
    if len(anchors) < 3:
        raise ValueError(
            f"root alignment needs >= 3 valid torso keypoints, "
            f"have {len(anchors)}")
    base = replace(params, theta_r=np.zeros(3), t=np.zeros(3))
    _, kp = forward(model, base)
    src = kp[anchors]
    dst = target.joints[anchors]
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    theta_r = _log_rotation(R)
    t = dc - R @ sc

    problem = LeastSquaresProblem()
    problem.add_parameter_block("r", theta_r)
    problem.add_parameter_block("t", t)

    def fn(th_r, tt):
        world, kp, _ = forward_with_jacobians(
            model, replace(base, theta_r=th_r, t=tt))
        return (kp[anchors] - dst).reshape(-1)

    def jac(th_r, tt):
        _, _, jj = forward_with_jacobians(
            model, replace(base, theta_r=th_r, t=tt))
        return [jj["theta_r"][anchors].reshape(-1, 3),
                jj["t"][anchors].reshape(-1, 3)]

    problem.add_residual_block(fn, ["r", "t"], 3 * len(anchors), jac=jac,
                               name="root_align")
    solve_least_squares(problem, SolveConfig(max_iterations=50))
    return (canonical_axis_angle(problem.values("r")),
            problem.values("t").copy())


def _log_rotation(R):
    """Axis-angle of a rotation matrix (inverse of rodrigues)."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos))
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        signs = np.array([1.0,
                          np.sign(A[0, 1]) or 1.0,
                          np.sign(A[0, 2]) or 1.0])
        axis = axis * signs
        return axis / np.linalg.norm(axis) * angle
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(angle)) * angle


# ---------------------------------------------------------------------------
# phase 3: sequence refinement
# ---------------------------------------------------------------------------

@dataclass
class RefineWeights:
    data: float = 1.0
    smooth: float = 10.0
    shape: float = 0.01


class _FrameFK:
    """One-slot FK cache per frame: the solver evaluates each residual block's
    fn and jac with identical values many times per iteration."""

    def __init__(self, model):
        self.model = model
        self.slots = {}

    def eval(self, frame, beta, th_r, th_b, tt):
        key = (beta.tobytes(), th_r.tobytes(), th_b.tobytes(), tt.tobytes())
        hit = self.slots.get(frame)
        if hit is not None and hit[0] == key:
            return hit[1]
        params = BodyParams(th_r, th_b, tt, beta)
        out = forward_with_jacobians(self.model, params)
        self.slots[frame] = (key, out)
        return out


def build_refine_problem(model, init, observations=None, cameras=None, *,
                         weights=None, data_mode="2d", pose_targets=None,
                         conf_threshold=0.3, theta_prior=None,
                         prior_weight=0.0, root_targets=None,
                         root_weight=0.0):
    """Assemble the sequence-refinement least-squares problem.

    init: {frame: BodyParams}; beta is shared and seeded from the first frame.
    observations ("2d" mode): {frame: [Detection2D]} with cameras a name->
    Camera map.  pose_targets ("3d" mode): {frame: SkeletonPose}.
    theta_prior: optional {frame: (3*(J-1),)} body-pose prior, weighted by
    prior_weight (squared difference; off at weight 0).
    root_targets: optional {frame: (3,)} mid-hip world positions (normally the
    triangulated track); weighted by root_weight, off at weight 0.  See
    _root_residual for why the 2D data term needs this.
    """
    w = weights or RefineWeights()
    frames = sorted(init)
    if not frames:
        raise ValueError("no frames to refine")
    if data_mode not in ("2d", "3d"):
        raise ValueError(f"unknown data_mode {data_mode!r}")
    problem = LeastSquaresProblem()
    problem.add_parameter_block("beta", init[frames[0]].beta)
    for f in frames:
        problem.add_parameter_block(f"{f}/r", init[f].theta_r)
        problem.add_parameter_block(f"{f}/b", init[f].theta_b)
        problem.add_parameter_block(f"{f}/t", init[f].t)
    fk = _FrameFK(model)

    def frame_params(f):
        return ["beta", f"{f}/r", f"{f}/b", f"{f}/t"]

    n_data = 0
    if data_mode == "2d":
        for f in frames:
            for det in (observations or {}).get(f, []):
                cam = cameras[det.camera]
                sel = np.flatnonzero(det.joints[:, 2] >= conf_threshold)
                if sel.size == 0:
                    continue
                n_data += 1
                problem.add_residual_block(
                    *_reprojection_residual(fk, f, cam, det, sel,
                                            conf_threshold),
                    weight=w.data, name=f"data/{f}/{det.camera}")
    else:
        for f in frames:
            pose = (pose_targets or {}).get(f)
            if pose is None:
                continue
            sel = np.flatnonzero(pose.valid)
            if sel.size == 0:
                continue
            n_data += 1
            problem.add_residual_block(
                *_joint3d_residual(fk, f, pose, sel),
                weight=w.data, name=f"data3d/{f}")
    if n_data == 0:
        raise ValueError("refinement has no data residuals")

    for a, b, c in zip(frames, frames[1:], frames[2:]):
        if b - a == 1 and c - b == 1:
            problem.add_residual_block(
                *_smoothness_residual(fk, model, a, b, c),
                weight=w.smooth, name=f"smooth/{b}")

    nb = init[frames[0]].beta.size
    problem.add_residual_block(
        lambda beta: beta, ["beta"], nb,
        jac=lambda beta: [np.eye(nb)], weight=w.shape, name="shape")

    if theta_prior and prior_weight > 0.0:
        for f in frames:
            prior = theta_prior.get(f)
            if prior is None:
                continue
            prior = np.asarray(prior, dtype=float).reshape(-1)
            problem.add_residual_block(
                (lambda p: lambda th_b: th_b - p)(prior),
                [f"{f}/b"], prior.size,
                jac=(lambda n: lambda th_b: [np.eye(n)])(prior.size),
                weight=prior_weight, name=f"prior/{f}")

    if root_targets and root_weight > 0.0:
        for f in frames:
            target = root_targets.get(f)
            if target is None:
                continue
            problem.add_residual_block(
                *_root_residual(fk, f, target),
                weight=root_weight, name=f"root/{f}")
    return problem


def _reprojection_residual(fk, frame, cam, det, sel, conf_threshold):
    """Hip-anchored 2D data term for one detection in one camera."""
    targets = det.joints[sel, :2]
    conf = np.sqrt(det.joints[sel, 2])
    hips_ok = np.all(det.joints[[LEFT_HIP, RIGHT_HIP], 2] >= conf_threshold)
    det_anchor = (det.joints[[LEFT_HIP, RIGHT_HIP], :2].mean(axis=0)
                  if hips_ok else np.zeros(2))
    hip_idx = [LEFT_HIP, RIGHT_HIP]
    dim = 2 * sel.size

    def project(kp):
        px, jac = project_jacobians(cam, kp[sel])
        if hips_ok:
            hp, hjac = project_jacobians(cam, kp[hip_idx])
            return px, jac["X"], hp, hjac["X"]
        return px, jac["X"], None, None

    def fn(beta, th_r, th_b, tt):
        _, kp, _ = fk.eval(frame, beta, th_r, th_b, tt)
        try:
            px, _, hp, _ = project(kp)
        except NonPositiveDepth:
            return np.full(dim, BEHIND_CAMERA_RESIDUAL)
        res = px - targets
        if hips_ok:
            res = res - (hp.mean(axis=0) - det_anchor)
        return (res * conf[:, None]).reshape(-1)

    def jac(beta, th_r, th_b, tt):
        _, kp, jj = fk.eval(frame, beta, th_r, th_b, tt)
        try:
            _, JX, _, HJX = project(kp)
        except NonPositiveDepth:
            return [np.zeros((dim, jj[k].shape[2]))
                    for k in ("beta", "theta_r", "theta_b", "t")]
        out = []
        for k in ("beta", "theta_r", "theta_b", "t"):
            Jk = np.einsum("kab,kbn->kan", JX, jj[k][sel])
            if hips_ok:
                Jh = np.einsum("kab,kbn->kan", HJX, jj[k][hip_idx])
                Jk = Jk - Jh.mean(axis=0)
            out.append((Jk * conf[:, None, None]).reshape(dim, -1))
        return out

    return fn, ["beta", f"{frame}/r", f"{frame}/b", f"{frame}/t"], dim, jac


def _joint3d_residual(fk, frame, pose, sel):
    """Plain 3D joint data term (formula-literal mode)."""
    targets = pose.joints[sel]
    dim = 3 * sel.size

    def fn(beta, th_r, th_b, tt):
        _, kp, _ = fk.eval(frame, beta, th_r, th_b, tt)
        return (kp[sel] - targets).reshape(-1)

    def jac(beta, th_r, th_b, tt):
        _, _, jj = fk.eval(frame, beta, th_r, th_b, tt)
        return [jj[k][sel].reshape(dim, -1)
                for k in ("beta", "theta_r", "theta_b", "t")]

    return fn, ["beta", f"{frame}/r", f"{frame}/b", f"{frame}/t"], dim, jac


def _root_residual(fk, frame, target):
    """Mid-hip position prior tying the refined root to a 3D trajectory.

    The hip-anchored 2D data term measures pose relative to the projected
    mid-hip, which leaves the absolute translation of the body nearly
    unobservable (a rigid shift of the whole body changes the anchored
    residuals only through perspective foreshortening, ~extent/depth).  Under
    detection noise the optimizer will happily wander along that direction,
    so sequence fits that start from a triangulated track pin the root to it.
    """
    target = np.asarray(target, dtype=float).reshape(3)
    hip_idx = [LEFT_HIP, RIGHT_HIP]

    def fn(beta, th_r, th_b, tt):
        _, kp, _ = fk.eval(frame, beta, th_r, th_b, tt)
        return kp[hip_idx].mean(axis=0) - target

    def jac(beta, th_r, th_b, tt):
        _, _, jj = fk.eval(frame, beta, th_r, th_b, tt)
        return [jj[k][hip_idx].mean(axis=0)
                for k in ("beta", "theta_r", "theta_b", "t")]

    return fn, ["beta", f"{frame}/r", f"{frame}/b", f"{frame}/t"], 3, jac


def _smoothness_residual(fk, model, a, b, c):
    """Second difference of regressed keypoints over frames (a, b, c)."""
    K = model.n_keypoints
    dim = 3 * K
    coeff = {a: 1.0, b: -2.0, c: 1.0}

    def fn(beta, ra, ba, ta, rb, bb, tb, rc, bc_, tc):
        vals = {a: (ra, ba, ta), b: (rb, bb, tb), c: (rc, bc_, tc)}
        out = np.zeros((K, 3))
        for f, (r, bo, t) in vals.items():
            _, kp, _ = fk.eval(f, beta, r, bo, t)
            out += coeff[f] * kp
        return out.reshape(-1)

    def jac(beta, ra, ba, ta, rb, bb, tb, rc, bc_, tc):
        vals = {a: (ra, ba, ta), b: (rb, bb, tb), c: (rc, bc_, tc)}
        jbeta = 0.0
        per_frame = []
        for f, (r, bo, t) in vals.items():
            _, _, jj = fk.eval(f, beta, r, bo, t)
            jbeta = jbeta + coeff[f] * jj["beta"].reshape(dim, -1)
            per_frame += [coeff[f] * jj[k].reshape(dim, -1)
                          for k in ("theta_r", "theta_b", "t")]
        return [jbeta] + per_frame

    params = ["beta"] + [f"{f}/{s}" for f in (a, b, c) for s in "rbt"]
    return fn, params, dim, jac


def refine_sequence(model, init, observations=None, cameras=None, *,
                    weights=None, data_mode="2d", pose_targets=None,
                    conf_threshold=0.3, theta_prior=None, prior_weight=0.0,
                    root_targets=None, root_weight=0.0, config=None):
    """Jointly refine all body parameters of one track.

    Returns ({frame: BodyParams} with the shared refined beta, SolveReport).
    """
    problem = build_refine_problem(
        model, init, observations, cameras, weights=weights,
        data_mode=data_mode, pose_targets=pose_targets,
        conf_threshold=conf_threshold, theta_prior=theta_prior,
        prior_weight=prior_weight, root_targets=root_targets,
        root_weight=root_weight)
    report = solve_least_squares(
        problem, config or SolveConfig(max_iterations=100))
    beta = problem.values("beta").copy()
    out = {}
    for f in sorted(init):
        out[f] = BodyParams(problem.values(f"{f}/r"), problem.values(f"{f}/b"),
                            problem.values(f"{f}/t"), beta).canonicalized()
    return out, report


def _sequential_pose_init(model, init, pose_targets, *, config=None):
    """Per-frame pose polish, each frame warm-started from the previous.

    The sequence refinement starts at a rest pose; swinging limbs can sit
    more than a radian away, which costs the full-sequence solver dozens
    of iterations just to articulate.  Tiny single-frame solves (beta
    frozen, no smoothness) close most of that gap first, and carrying
    each frame's pose into the next keeps the init continuous in time.

    Returns ({frame: BodyParams}, SolveReport summed over the frames).
    """
    cfg = config or SolveConfig(max_iterations=12, cost_tol=1e-12)
    out = {}
    carry = None
    c0 = c1 = 0.0
    iters = n_res = n_par = 0
    for f in sorted(init):
        p = init[f]
        pose = pose_targets.get(f)
        if pose is None or not np.any(pose.valid):
            out[f] = p
            continue
        if carry is not None:
            p = replace(p, theta_b=carry.copy())
        problem = build_refine_problem(model, {f: p}, data_mode="3d",
                                       pose_targets={f: pose})
        problem.blocks["beta"].frozen = True
        rep = solve_least_squares(problem, cfg)
        out[f] = BodyParams(problem.values(f"{f}/r"), problem.values(f"{f}/b"),
                            problem.values(f"{f}/t"), p.beta)
        carry = out[f].theta_b
        c0 += rep.initial_cost
        c1 += rep.final_cost
        iters += rep.iterations
        n_res += rep.n_residuals
        n_par += rep.n_parameters
    return out, SolveReport(c0, c1, iters, "sequential", n_res, n_par)


def fit_track(model, track, observations=None, cameras=None, *,
              weights=None, conf_threshold=0.3, theta_prior=None,
              prior_weight=0.0, root_weight=100.0, sequential_init=True,
              sequence_refine=True, config=None):
    """Fit one track: shape, per-frame root + pose init, full refinement.

    observations: {frame: [Detection2D]} already associated with this track
    (with cameras) for the 2D data term; without them the refinement falls
    back to the 3D joint residual against the track's own poses.

    The 2D path keeps the refined root tied to the triangulated mid-hip with
    a weak prior (root_weight, squared meters; 0 disables) because the
    hip-anchored reprojection term alone cannot fix absolute position.

    sequence_refine=False stops after the warm-started per-frame solves —
    no smoothness term, one independent problem per frame, linear cost in
    track length.  Only the 3D path supports it (per-frame 2D pose from a
    single hip-anchored view is underdetermined).
    """
    frames = track.frames()
    poses = [track.poses[f] for f in frames]
    beta = solve_shape(model, poses)
    init = {}
    base = zero_params(model)
    base.beta = beta
    for f in frames:
        try:
            theta_r, t = align_root(model, base, track.poses[f])
        except ValueError:
            hip = track.poses[f].joints[[LEFT_HIP, RIGHT_HIP]].mean(axis=0)
            theta_r, t = np.zeros(3), hip - _rest_mid_hip(model, beta)
        init[f] = BodyParams(theta_r, base.theta_b.copy(), t, beta)
    if not sequence_refine:
        if observations is not None:
            raise ValueError("sequence_refine=False requires the 3D path")
        init, report = _sequential_pose_init(model, init, track.poses,
                                             config=config)
        return {f: p.canonicalized() for f, p in init.items()}, report
    if sequential_init:
        init, _ = _sequential_pose_init(model, init, track.poses)
    if observations is not None:
        roots = {}
        for f in frames:
            try:
                roots[f] = track.poses[f].mid_hip()
            except ValueError:
                pass
        return refine_sequence(model, init, observations, cameras,
                               weights=weights, conf_threshold=conf_threshold,
                               theta_prior=theta_prior,
                               prior_weight=prior_weight, root_targets=roots,
                               root_weight=root_weight, config=config)
    return refine_sequence(model, init, data_mode="3d",
                           pose_targets=track.poses, weights=weights,
                           theta_prior=theta_prior, prior_weight=prior_weight,
                           config=config)


def _rest_mid_hip(model, beta):
    kp = model.regressor @ (model.template
                            + np.einsum("s,sjc->jc", beta, model.blend))
    return kp[[LEFT_HIP, RIGHT_HIP]].mean(axis=0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def body_model_to_dict(model):
    entries = [[int(k), int(j), float(model.regressor[k, j])]
               for k, j in zip(*np.nonzero(model.regressor))]
    d = {
        "v": 1,
        "parents": model.parents.tolist(),
        "template": model.template.tolist(),
        "blend": model.blend.tolist(),
        "regressor": {"rows": model.n_keypoints, "entries": entries},
        "bones": [[a, b] for a, b in model.bones],
    }
    if model.vertex_template is not None:
        d["vertex_template"] = model.vertex_template
    if model.vertex_regressor is not None:
        d["vertex_regressor"] = model.vertex_regressor
    return d


def body_model_from_dict(d):
    parents = np.asarray(d["parents"], dtype=int)
    reg = np.zeros((int(d["regressor"]["rows"]), len(parents)))
    for k, j, w in d["regressor"]["entries"]:
        reg[int(k), int(j)] = float(w)
    model = BodyModel(parents=parents,
                      template=np.asarray(d["template"], dtype=float),
                      blend=np.asarray(d["blend"], dtype=float),
                      regressor=reg,
                      bones=[tuple(b) for b in d["bones"]],
                      vertex_template=d.get("vertex_template"),
                      vertex_regressor=d.get("vertex_regressor"))
    model.validate()
    return model


def write_body_model_json(path, model):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body_model_to_dict(model), fh, indent=1)
        fh.write("\n")


def read_body_model_json(path):
    with open(path, encoding="utf-8") as fh:
        return body_model_from_dict(json.load(fh))


def body_params_to_dict(fits):
    """fits: {track_id: {frame: BodyParams}} (beta shared within a track)."""
    tracks = []
    for tid in sorted(fits):
        by_frame = fits[tid]
        frames = sorted(by_frame)
        tracks.append({
            "id": int(tid),
            "beta": by_frame[frames[0]].beta.tolist(),
            "frames": {str(f): {"theta_r": by_frame[f].theta_r.tolist(),
                                "theta_b": by_frame[f].theta_b.tolist(),
                                "t": by_frame[f].t.tolist()}
                       for f in frames},
        })
    return {"v": 1, "tracks": tracks}


def body_params_from_dict(d):
    fits = {}
    for tr in d["tracks"]:
        beta = np.asarray(tr["beta"], dtype=float)
        fits[int(tr["id"])] = {
            int(f): BodyParams(v["theta_r"], v["theta_b"], v["t"], beta)
            for f, v in tr["frames"].items()}
    return fits


def write_body_params_json(path, fits):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body_params_to_dict(fits), fh, indent=1)
        fh.write("\n")


def read_body_params_json(path):
    with open(path, encoding="utf-8") as fh:
        return body_params_from_dict(json.load(fh))
