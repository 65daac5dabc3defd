"""Pinhole camera geometry with radial distortion, quaternion rotations and rays.

Conventions used throughout the package:

* World frame: right handed, z up, units in meters.
* A camera maps world points to camera coordinates via ``x_cam = R @ X + t``;
  the camera center in world coordinates is ``C = -R.T @ t``.
* Rotations are stored as unit quaternions in ``[w, x, y, z]`` order.  Local
  updates (used by the solver) are axis-angle increments ``delta`` composed on
  the left: ``q_new = quat_from_axis_angle(delta) * q``, i.e. the rotation
  matrix becomes ``exp(skew(delta)) @ R``.
* Pixel coordinates are ``(u, v)`` with ``u`` along image width.  Distortion is
  the 3-term radial (Brown) model applied to normalized coordinates:
  ``x_d = x_n * (1 + k1 r^2 + k2 r^4 + k3 r^6)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_EPS = 1e-9


class NonPositiveDepth(ValueError):
    """A point to be projected lies at or behind the camera plane."""


class DistortionInversionDiverged(RuntimeError):
    """The iterative undistortion failed to converge for a pixel."""


# ---------------------------------------------------------------------------
# quaternion helpers ([w, x, y, z] order everywhere)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize zero quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps serialized cameras reproducible
    if q[0] < 0:
        q = -q
    return q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(v):
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        # first-order expansion, exact enough below the sqrt(eps) scale
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / theta
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def axis_angle_from_quat(q):
    q = quat_normalize(q)
    w = min(1.0, max(-1.0, q[0]))
    theta = 2.0 * np.arccos(w)
    s = np.sqrt(max(0.0, 1.0 - w * w))
    if s < 1e-12:
        return 2.0 * q[1:4]
    return (theta / s) * q[1:4]


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1e-12, 1.0 + R[i, i] - R[j, j] - R[k, k])) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def rodrigues(v):
    """Axis-angle vector -> rotation matrix."""
    return quat_to_matrix(quat_from_axis_angle(v))


def rodrigues_jacobian(v):
    """Derivatives d(rodrigues(v)) / d v_k, returned as array (3, 3, 3).

    Index [k] is the 3x3 derivative of the rotation matrix with respect to the
    k-th component of the axis-angle vector.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    R = rodrigues(v)
    out = np.empty((3, 3, 3))
    if theta < 1e-8:
        # dR/dv_k -> generator of rotations (skew basis) at the identity
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            out[k] = skew(e)
        return out
    # Gallego & Yezzi closed form
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        w = v
        term = (w[k] * skew(w) + skew(np.cross(w, (np.eye(3) - R) @ e))) / (theta * theta)
        out[k] = term @ R
    return out


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_geodesic_deg(Ra, Rb):
    """Angle in degrees between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) * 0.5
    return float(np.degrees(np.arccos(min(1.0, max(-1.0, c)))))


def look_at_rotation(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at `center` looking at `target`.

    Camera convention: +z forward (into the scene), +x right, +y down, so a z-up
    world with the default `up` renders upright images.
    """
    fwd = np.asarray(target, dtype=float) - np.asarray(center, dtype=float)
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

@dataclass
class Ray:
    """Half-line in world coordinates: origin + t * direction, t >= 0."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("ray direction must be non-zero")
        self.direction = d / n

    def point_at(self, t):
        return self.origin + t * self.direction


def point_to_ray_distance(point, ray):
    """Distance from a 3D point to a ray (half-line, parameter clamped at 0)."""
    p = np.asarray(point, dtype=float) - ray.origin
    t = float(p @ ray.direction)
    if t < 0.0:
        t = 0.0
    return float(np.linalg.norm(p - t * ray.direction))


def points_to_rays_distance(points, origins, directions):
    """Vectorized clamped point-to-ray distances.

    points (..., 3), origins (..., 3), directions (..., 3, unit) broadcast
    together; returns (...) distances.
    """
    p = np.asarray(points, dtype=float) - origins
    t = np.sum(p * directions, axis=-1)
    t = np.maximum(t, 0.0)
    closest = t[..., None] * directions
    return np.linalg.norm(p - closest, axis=-1)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Calibrated pinhole camera with 3-term radial distortion."""

    name: str
    image_size: tuple  # (width, height) px
    focal: np.ndarray  # (fx, fy) px
    principal: np.ndarray  # (cx, cy) px
    dist: np.ndarray  # (k1, k2, k3)
    rotation_quat_wxyz: np.ndarray  # unit quaternion, world-to-camera
    translation: np.ndarray  # t with x_cam = R X + t

    def __post_init__(self):
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError("image_size must be positive")
        self.focal = np.asarray(self.focal, dtype=float).reshape(2)
        if np.any(self.focal <= 0):
            raise ValueError("focal lengths must be positive")
        self.principal = np.asarray(self.principal, dtype=float).reshape(2)
        self.dist = np.asarray(self.dist, dtype=float).reshape(3)
        q = np.asarray(self.rotation_quat_wxyz, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"rotation quaternion norm {n:.6g} too far from 1")
        self.rotation_quat_wxyz = quat_normalize(q)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self._R = quat_to_matrix(self.rotation_quat_wxyz)

    # -- derived quantities -------------------------------------------------

    @property
    def R(self):
        # cached at construction; treat Camera instances as immutable
        return self._R

    @property
    def center(self):
        return -self.R.T @ self.translation

    # -- projection ---------------------------------------------------------

    def project(self, points):
        """Project world points (3,) or (N, 3) to pixels; raises NonPositiveDepth."""
        X = np.asarray(points, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        x_cam = X @ self.R.T + self.translation
        z = x_cam[:, 2]
        if np.any(z <= DEPTH_EPS):
            bad = int(np.argmax(z <= DEPTH_EPS))
            raise NonPositiveDepth(
                f"camera {self.name}: point {bad} has depth {z[bad]:.3g}")
        px = _distort_project(x_cam, self.focal, self.principal, self.dist)
        return px[0] if single else px

    def project_masked(self, points):
        """Like project() but returns (px, valid) instead of raising.

        Points at non-positive depth get px = nan and valid = False.
        """
        X = np.atleast_2d(np.asarray(points, dtype=float))
        x_cam = X @ self.R.T + self.translation
        z = x_cam[:, 2]
        valid = z > DEPTH_EPS
        px = np.full((len(X), 2), np.nan)
        if np.any(valid):
            px[valid] = _distort_project(x_cam[valid], self.focal,
                                         self.principal, self.dist)
        return px, valid

    def undistort_pixels(self, pixels):
        """Pixel coords (N, 2) -> undistorted normalized coords (N, 2)."""
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        xd = (px - self.principal) / self.focal
        rd = np.linalg.norm(xd, axis=1)
        r = _invert_radial(rd, self.dist)
        scale = np.where(rd > 1e-12, r / np.maximum(rd, 1e-300), 1.0)
        return xd * scale[:, None]

    def unproject_ray(self, pixel):
        """Pixel -> Ray from the camera center through that pixel (world frame)."""
        xn = self.undistort_pixels(np.asarray(pixel, dtype=float).reshape(1, 2))[0]
        d_cam = np.array([xn[0], xn[1], 1.0])
        d_world = self.R.T @ d_cam
        return Ray(origin=self.center, direction=d_world)

    def in_image(self, px, margin=0.0):
        px = np.atleast_2d(np.asarray(px, dtype=float))
        w, h = self.image_size
        return ((px[:, 0] >= -margin) & (px[:, 0] <= w - 1 + margin)
                & (px[:, 1] >= -margin) & (px[:, 1] <= h - 1 + margin))

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "focal": [float(v) for v in self.focal],
            "principal": [float(v) for v in self.principal],
            "dist": [float(v) for v in self.dist],
            "rotation_quat_wxyz": [float(v) for v in self.rotation_quat_wxyz],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            image_size=tuple(d["image_size"]),
            focal=d["focal"],
            principal=d["principal"],
            dist=d["dist"],
            rotation_quat_wxyz=d["rotation_quat_wxyz"],
            translation=d["translation"],
        )


def camera_from_center(name, image_size, focal, principal, dist, R, center):
    """Build a Camera from a rotation matrix and a world-space camera center."""
    center = np.asarray(center, dtype=float)
    return Camera(
        name=name,
        image_size=image_size,
        focal=focal,
        principal=principal,
        dist=dist,
        rotation_quat_wxyz=matrix_to_quat(R),
        translation=-np.asarray(R) @ center,
    )


# ---------------------------------------------------------------------------
# projection internals + analytic jacobians
# ---------------------------------------------------------------------------

def _distort_project(x_cam, focal, principal, dist):
    z = x_cam[:, 2:3]
    xn = x_cam[:, :2] / z
    r2 = np.sum(xn * xn, axis=1, keepdims=True)
    k1, k2, k3 = dist
    d = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    return xn * d * focal + principal


def _invert_radial(rd, dist, max_iter=25, tol=1e-12):
    """Solve r * (1 + k1 r^2 + k2 r^4 + k3 r^6) = rd for r (vectorized Newton)."""
    k1, k2, k3 = dist
    if k1 == 0.0 and k2 == 0.0 and k3 == 0.0:
        return np.array(rd, dtype=float, copy=True)
    r = np.array(rd, dtype=float, copy=True)
    for _ in range(max_iter):
        r2 = r * r
        d = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        f = r * d - rd
        fp = 1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + r2 * 7.0 * k3))
        if np.any(fp <= 1e-9):
            raise DistortionInversionDiverged(
                "radial distortion not invertible at requested radius")
        step = f / fp
        r = r - step
        if np.max(np.abs(step)) < tol * max(1.0, float(np.max(np.abs(rd)))):
            break
    else:
        raise DistortionInversionDiverged(
            f"undistortion did not converge within {max_iter} iterations")
    return r


def pinhole_jacobians(x_cam, focal, principal, dist):
    """Pixel projection of camera-space points plus partial derivatives.

    Returns (px, d_px/d_x_cam (N,2,3), d_px/d_f (N,2,2), d_px/d_c (N,2,2),
    d_px/d_k (N,2,3)).  Depths must already be positive.
    """
    x_cam = np.atleast_2d(x_cam)
    n = len(x_cam)
    z = x_cam[:, 2]
    xn = x_cam[:, :2] / z[:, None]
    r2 = np.sum(xn * xn, axis=1)
    k1, k2, k3 = dist
    d = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dd_dr2 = k1 + r2 * (2.0 * k2 + r2 * 3.0 * k3)
    xd = xn * d[:, None]
    px = xd * focal + principal

    # d xd / d xn = d * I + 2 * dd_dr2 * xn xn^T
    J_xd_xn = d[:, None, None] * np.eye(2)[None] \
        + 2.0 * dd_dr2[:, None, None] * xn[:, :, None] * xn[:, None, :]
    # d xn / d x_cam
    J_xn_xc = np.zeros((n, 2, 3))
    inv_z = 1.0 / z
    J_xn_xc[:, 0, 0] = inv_z
    J_xn_xc[:, 1, 1] = inv_z
    J_xn_xc[:, 0, 2] = -xn[:, 0] * inv_z
    J_xn_xc[:, 1, 2] = -xn[:, 1] * inv_z

    J_px_xc = focal[None, :, None] * np.einsum("nij,njk->nik", J_xd_xn, J_xn_xc)

    J_px_f = np.zeros((n, 2, 2))
    J_px_f[:, 0, 0] = xd[:, 0]
    J_px_f[:, 1, 1] = xd[:, 1]

    J_px_c = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()

    r2c = r2[:, None]
    powers = np.stack([r2c, r2c ** 2, r2c ** 3], axis=2)  # (n, 1, 3)
    J_px_k = focal[None, :, None] * xn[:, :, None] * powers

    return px, J_px_xc, J_px_f, J_px_c, J_px_k


def project_jacobians(camera, X):
    """Project world points and return analytic derivatives for a static camera.

    Returns (px, jac) where ``jac`` maps parameter names to arrays:
      "f" (N,2,2), "c" (N,2,2), "k" (N,2,3),
      "rot" (N,2,3)  wrt a left axis-angle increment on R,
      "t" (N,2,3), "X" (N,2,3).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = camera.R
    x_cam = X @ R.T + camera.translation
    if np.any(x_cam[:, 2] <= DEPTH_EPS):
        raise NonPositiveDepth(f"camera {camera.name}: non-positive depth in jacobian")
    px, J_xc, J_f, J_c, J_k = pinhole_jacobians(
        x_cam, camera.focal, camera.principal, camera.dist)
    RX = x_cam - camera.translation
    # d x_cam / d delta = -skew(R X) for x_cam = exp(skew(delta)) R X + t
    J_rot_xc = np.zeros((len(X), 3, 3))
    J_rot_xc[:, 0, 1] = RX[:, 2]
    J_rot_xc[:, 0, 2] = -RX[:, 1]
    J_rot_xc[:, 1, 0] = -RX[:, 2]
    J_rot_xc[:, 1, 2] = RX[:, 0]
    J_rot_xc[:, 2, 0] = RX[:, 1]
    J_rot_xc[:, 2, 1] = -RX[:, 0]
    jac = {
        "f": J_f,
        "c": J_c,
        "k": J_k,
        "rot": np.einsum("nij,njk->nik", J_xc, J_rot_xc),
        "t": J_xc,
        "X": np.einsum("nij,jk->nik", J_xc, R),
    }
    return px, jac
