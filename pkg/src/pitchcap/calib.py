"""Three-stage static camera calibration against the field template.

Stage 1: DLT homography from manually picked landmark correspondences,
decomposed into an initial pinhole camera (fx=fy, principal at image center,
no distortion).  Stage 2: nonlinear refinement of all camera parameters
(including radial distortion) against the 3D template points, which matters
because the pitch is crowned, not planar.  Stage 3: photometric refinement
pulling projected marking samples onto the image's line pixels through an
exact distance field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .field import closest_template_point, flatten, sample_markings
from .geometry import Camera, matrix_to_quat, project_jacobians, quat_to_matrix
from .solver import (
    LeastSquaresProblem,
    SolveConfig,
    solve_least_squares,
)

log = logging.getLogger(__name__)


class DegenerateConfiguration(ValueError):
    """Correspondences are too few, duplicated or near-collinear."""


class DecompositionFailed(RuntimeError):
    """Homography inconsistent with a camera above the plane (imaginary focal)."""


class NoVisibleMarkings(RuntimeError):
    """Too few sampled marking points project into the image."""


@dataclass
class CorrespondenceSet:
    """Manually picked (landmark id, pixel) pairs for one camera."""

    camera: str
    pairs: list  # [(landmark_id, np.ndarray (2,)), ...]

    def __post_init__(self):
        self.pairs = [(str(i), np.asarray(p, dtype=float).reshape(2))
                      for i, p in self.pairs]

    def validate(self, template=None, image_size=None):
        ids = [i for i, _ in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate landmark picks for camera {self.camera}")
        if template is not None:
            known = set(template.landmark_ids())
            for i in ids:
                if i not in known:
                    raise ValueError(f"pick references unknown landmark {i!r}")
        if image_size is not None:
            w, h = image_size
            for i, p in self.pairs:
                if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
                    raise ValueError(f"pick {i!r} outside image bounds")

    def pixels(self):
        return np.array([p for _, p in self.pairs])

    def to_dict(self):
        return {
            "v": 1,
            "camera": self.camera,
            "pairs": [{"landmark_id": i, "px": [float(p[0]), float(p[1])]}
                      for i, p in self.pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(camera=d["camera"],
                   pairs=[(e["landmark_id"], e["px"]) for e in d["pairs"]])


@dataclass
class Homography:
    """3x3 image->flattened-field map, Frobenius-normalized, H[2,2] >= 0."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float).reshape(3, 3)
        n = np.linalg.norm(H)
        if n < 1e-15:
            raise DegenerateConfiguration("zero homography")
        H = H / n
        if H[2, 2] < 0:
            H = -H
        s = np.linalg.svd(H, compute_uv=False)
        if s[-1] <= 0 or s[0] / s[-1] >= 1e12:
            raise DegenerateConfiguration(
                f"homography condition number {s[0] / max(s[-1], 1e-300):.3g}")
        self.H = H

    def apply(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.H.T
        return hom[:, :2] / hom[:, 2:3]


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return T


def estimate_homography(pairs):
    """DLT with Hartley normalization; maps source pixels to target plane coords.

    `pairs` is a list of ((u, v), (x, y)) tuples.
    """
    if len(pairs) < 4:
        raise DegenerateConfiguration(f"need >= 4 pairs, got {len(pairs)}")
    src = np.array([p[0] for p in pairs], dtype=float)
    dst = np.array([p[1] for p in pairs], dtype=float)
    for pts, label in ((src, "source"), (dst, "target")):
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() < 1e-9:
            raise DegenerateConfiguration(f"duplicate {label} points")
        centered = pts - pts.mean(axis=0)
        if np.linalg.svd(centered, compute_uv=False)[1] < 1e-9:
            raise DegenerateConfiguration(f"{label} points are collinear")

    Ts, Td = _hartley_normalization(src), _hartley_normalization(dst)
    sh = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ Td.T

    A = np.zeros((2 * len(pairs), 9))
    for i in range(len(pairs)):
        x, y, _ = sh[i]
        xp, yp, _ = dh[i]
        A[2 * i] = [-x, -y, -1, 0, 0, 0, x * xp, y * xp, xp]
        A[2 * i + 1] = [0, 0, 0, -x, -y, -1, x * yp, y * yp, yp]
    _, s, Vt = np.linalg.svd(A)
    if len(pairs) > 4 and s[-2] < 1e-9 * max(s[0], 1e-30):
        raise DegenerateConfiguration("DLT system is rank deficient")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return Homography(H=H)


def decompose_homography(hom, image_size):
    """Initial camera from an image->field homography.

    Assumes square pixels and the principal point at the image center; the
    focal follows from the rotation-orthogonality constraints, the pose from
    the normalized columns.  The camera is placed above the field (z > 0).
    """
    G = np.linalg.inv(hom.H)  # field plane -> image
    w, h = image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    g1, g2 = G[:, 0], G[:, 1]
    u1 = np.array([g1[0] - cx * g1[2], g1[1] - cy * g1[2]])
    u2 = np.array([g2[0] - cx * g2[2], g2[1] - cy * g2[2]])
    w1, w2 = g1[2], g2[2]
    # f^2 from h1.w.h2 = 0 and |h1|_w = |h2|_w, solved jointly in phi = f^2
    a = np.array([w1 * w2, w1 * w1 - w2 * w2])
    b = np.array([u1 @ u2, u1 @ u1 - u2 @ u2])
    denom = a @ a
    if denom < 1e-18:
        raise DecompositionFailed("degenerate orthogonality constraints")
    phi = -(a @ b) / denom
    if phi <= 0:
        raise DecompositionFailed(f"imaginary focal (f^2 = {phi:.4g})")
    f = float(np.sqrt(phi))

    Kinv = np.array([[1.0 / f, 0.0, -cx / f],
                     [0.0, 1.0 / f, -cy / f],
                     [0.0, 0.0, 1.0]])
    M = Kinv @ G
    for sign in (1.0, -1.0):
        m = M * sign
        n1, n2 = np.linalg.norm(m[:, 0]), np.linalg.norm(m[:, 1])
        scale = 2.0 / (n1 + n2)
        r1, r2 = m[:, 0] * scale, m[:, 1] * scale
        r3 = np.cross(r1, r2)
        R_approx = np.column_stack([r1, r2, r3])
        U, _, Vt = np.linalg.svd(R_approx)
        R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
        t = m[:, 2] * scale
        center = -R.T @ t
        if center[2] > 0:
            return Camera(name="", image_size=image_size, focal=(f, f),
                          principal=(cx, cy), dist=(0.0, 0.0, 0.0),
                          rotation_quat_wxyz=matrix_to_quat(R), translation=t)
    raise DecompositionFailed("no decomposition places the camera above the field")


# ---------------------------------------------------------------------------
# shared camera parameter blocks (also used by bundle adjustment)
# ---------------------------------------------------------------------------

CAMERA_BLOCK_SUFFIXES = ("f", "c", "k", "q", "t")


def add_camera_blocks(problem, prefix, cam, *, square_pixels=True, use_k3=False,
                      freeze_principal=True, freeze_pose=False,
                      freeze_intrinsics=False):
    focal = np.array([cam.focal[0]]) if square_pixels else cam.focal.copy()
    problem.add_parameter_block(f"{prefix}/f", focal, frozen=freeze_intrinsics)
    problem.add_parameter_block(f"{prefix}/c", cam.principal.copy(),
                                frozen=freeze_principal or freeze_intrinsics)
    problem.add_parameter_block(f"{prefix}/k", cam.dist.copy(),
                                frozen=freeze_intrinsics,
                                mask=np.array([True, True, bool(use_k3)]))
    problem.add_parameter_block(f"{prefix}/q", cam.rotation_quat_wxyz.copy(),
                                manifold="quaternion", frozen=freeze_pose)
    problem.add_parameter_block(f"{prefix}/t", cam.translation.copy(),
                                frozen=freeze_pose)


def camera_block_names(prefix):
    return [f"{prefix}/{s}" for s in CAMERA_BLOCK_SUFFIXES]


def camera_from_blocks(name, image_size, f, c, k, q, t):
    focal = (f[0], f[0]) if len(f) == 1 else (f[0], f[1])
    return Camera(name=name, image_size=image_size, focal=focal, principal=c,
                  dist=k, rotation_quat_wxyz=q, translation=t)


def reprojection_residual_fns(name, image_size, X, observed, weights=None):
    """Residual + analytic Jacobian closures for Sum ||project(X) - observed||^2.

    Points behind the camera produce a large constant residual with zero
    gradient rows, which makes the solver reject steps that push structure
    behind the camera instead of crashing.
    """
    X = np.asarray(X, dtype=float)
    observed = np.asarray(observed, dtype=float)
    n = len(X)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)

    def build(f, c, k, q, t):
        return camera_from_blocks(name, image_size, f, c, k, q, t)

    def fn(f, c, k, q, t):
        cam = build(f, c, k, q, t)
        px, valid = cam.project_masked(X)
        r = np.where(valid[:, None], px - observed, 1e4)
        return (r * sw[:, None]).reshape(-1)

    def jac(f, c, k, q, t):
        cam = build(f, c, k, q, t)
        _, valid = cam.project_masked(X)
        if not np.all(valid):
            safe_X = np.where(valid[:, None], X, cam.center + cam.R.T @ [0, 0, 5.0])
        else:
            safe_X = X
        _, J = project_jacobians(cam, safe_X)
        vs = (valid[:, None] * sw[:, None])[:, :, None]  # zero rows when invalid
        Jf = (J["f"] * vs)
        if len(f) == 1:  # square pixels: d/df = d/dfx + d/dfy
            Jf = Jf.sum(axis=2, keepdims=True)
        return [Jf.reshape(2 * n, -1),
                (J["c"] * vs).reshape(2 * n, 2),
                (J["k"] * vs).reshape(2 * n, 3),
                (J["rot"] * vs).reshape(2 * n, 3),
                (J["t"] * vs).reshape(2 * n, 3)]

    return fn, jac


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass
class StaticCalibOptions:
    square_pixels: bool = True
    use_k3: bool = False
    release_principal_min_samples: int = 200  # stage 3 only
    marking_spacing: float = 0.25
    max_iterations: int = 200
    # Stage-3 anchors: the distance objective has near-flat directions
    # (focal vs. depth, principal vs. rotation) on an almost-planar target,
    # so everything except rotation is softly tied to its warm-start value.
    # Genuine misalignments cost hundreds of px^2 and overpower these.
    anchor_focal_px: float = 2.0
    anchor_principal_px: float = 2.0
    anchor_dist: float = 0.005
    anchor_translation_m: float = 0.05


@dataclass
class StageReport:
    rms_px: float
    solver: object = None
    objective_int: float | None = None
    n_points: int = 0


def stage1_camera(corr, template, image_size):
    """Stage 1: homography + decomposition.  Returns (camera, homography)."""
    flat = flatten(template)
    pairs = [(p, flat[i]) for i, p in corr.pairs]
    hom = estimate_homography(pairs)
    cam = decompose_homography(hom, image_size)
    cam.name = corr.camera
    return cam, hom


def _picks_to_3d(corr, template, hom):
    """Map picks through the stage-1 homography to their 3D template points."""
    flat_est = hom.apply(corr.pixels())
    return np.array([closest_template_point(template, q)[1] for q in flat_est])


def refine_stage2(cam, corr, template, opts=None, homography=None):
    """Stage 2: full nonlinear refinement on picked correspondences."""
    opts = opts or StaticCalibOptions()
    if homography is None:
        flat = flatten(template)
        homography = estimate_homography([(p, flat[i]) for i, p in corr.pairs])
    X = _picks_to_3d(corr, template, homography)
    obs = corr.pixels()

    problem = LeastSquaresProblem()
    add_camera_blocks(problem, "cam", cam, square_pixels=opts.square_pixels,
                      use_k3=opts.use_k3, freeze_principal=True)
    fn, jac = reprojection_residual_fns(cam.name, cam.image_size, X, obs)
    problem.add_residual_block(fn, camera_block_names("cam"), dim=2 * len(X),
                               jac=jac, name="stage2")
    report = solve_least_squares(
        problem, SolveConfig(max_iterations=opts.max_iterations))
    out = camera_from_blocks(cam.name, cam.image_size,
                             *[problem.values(n) for n in camera_block_names("cam")])
    rms = reprojection_rms(out, X, obs)
    return out, StageReport(rms_px=rms, solver=report, n_points=len(X))


def refine_stage3(cam, distance_field, template, opts=None):
    """Stage 3: distance-field refinement over sampled marking points.

    Only samples visible at the initial camera enter the objective: samples
    the image cannot see carry no evidence, and holding them at the constant
    border penalty would make every visible-set change a cost cliff.  Samples
    that drift out of frame during the solve use a clamped (continuous) edge
    lookup instead of the hard border constant.
    """
    opts = opts or StaticCalibOptions()
    samples = sample_markings(template, opts.marking_spacing)
    px, valid = cam.project_masked(samples)
    vis0 = valid & cam.in_image(px)
    visible = int(np.count_nonzero(vis0))
    if visible < 20:
        raise NoVisibleMarkings(
            f"camera {cam.name}: only {visible} marking samples visible")
    release_principal = visible >= opts.release_principal_min_samples
    opt_samples = samples[vis0]

    problem = LeastSquaresProblem()
    add_camera_blocks(problem, "cam", cam, square_pixels=opts.square_pixels,
                      use_k3=opts.use_k3,
                      freeze_principal=not release_principal)
    border = np.sqrt(distance_field.border_penalty + 1e-12)

    def fn(f, c, k, q, t):
        c2 = camera_from_blocks(cam.name, cam.image_size, f, c, k, q, t)
        p, v = c2.project_masked(opt_samples)
        r = np.full(len(opt_samples), border)
        if np.any(v):
            r[v] = np.sqrt(distance_field.lookup_clamped(p[v]) + 1e-12)
        return r

    problem.add_residual_block(fn, camera_block_names("cam"),
                               dim=len(opt_samples), name="stage3")

    def anchor(block, sigma):
        if problem.blocks[block].frozen:
            return
        ref = problem.values(block).copy()

        def res(x, _ref=ref, _s=sigma):
            return (x - _ref) / _s

        def jac(x, _s=sigma):
            return [np.eye(len(x)) / _s]

        problem.add_residual_block(res, [block], dim=len(ref), jac=jac,
                                   name=f"anchor:{block}")

    anchor("cam/f", opts.anchor_focal_px)
    anchor("cam/c", opts.anchor_principal_px)
    anchor("cam/k", opts.anchor_dist)
    anchor("cam/t", opts.anchor_translation_m)

    report = solve_least_squares(
        problem, SolveConfig(max_iterations=opts.max_iterations))
    out = camera_from_blocks(cam.name, cam.image_size,
                             *[problem.values(n) for n in camera_block_names("cam")])
    objective = stage3_objective(out, distance_field, samples)
    p_out, v_out = out.project_masked(samples)
    inside = v_out & out.in_image(p_out)
    rms = float(np.sqrt(np.mean(
        distance_field.lookup_interp(p_out[inside]) ** 2))) if inside.any() else float("inf")
    return out, StageReport(rms_px=rms, solver=report,
                            objective_int=objective, n_points=visible)


def stage3_objective(cam, distance_field, samples):
    """The reported photometric objective: integer-rounded distance lookups."""
    px, valid = cam.project_masked(samples)
    vals = np.full(len(samples), distance_field.border_penalty)
    if np.any(valid):
        vals[valid] = distance_field.lookup_int(px[valid])
    return float(np.sum(vals))


def reprojection_rms(cam, X, observed):
    px, valid = cam.project_masked(np.asarray(X, dtype=float))
    if not np.all(valid):
        return float("inf")
    err = np.linalg.norm(px - np.asarray(observed, dtype=float), axis=1)
    return float(np.sqrt(np.mean(err ** 2)))


def calibrate_camera(corr, template, image_size, distance_field=None,
                     opts=None, stages=(1, 2, 3)):
    """Run the requested calibration stages; returns (camera, per-stage reports)."""
    opts = opts or StaticCalibOptions()
    reports = {}
    cam, hom = stage1_camera(corr, template, image_size)
    X = _picks_to_3d(corr, template, hom)
    reports["stage1"] = StageReport(rms_px=reprojection_rms(cam, X, corr.pixels()),
                                    n_points=len(X))
    if 2 in stages:
        cam, reports["stage2"] = refine_stage2(cam, corr, template, opts,
                                               homography=hom)
    if 3 in stages:
        if distance_field is None:
            raise ValueError("stage 3 requested but no distance field given")
        cam, reports["stage3"] = refine_stage3(cam, distance_field, template, opts)
    return cam, reports
