"""Soccer-pitch template: named landmarks, marking polylines, distance fields.

The template lives in world coordinates with the pitch center at the origin,
x along the long side (touchlines at y = +-width/2), z up.  Real pitches are
not flat: a small crown raises the center for drainage, so landmark/line
heights carry a parabolic bump.  The flattened view drops z and is what
homographies map into.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PITCH_LENGTH = 105.0
PITCH_WIDTH = 68.0
CROWN_HEIGHT = 0.2

Z_MIN, Z_MAX = -0.05, 0.35


class EmptyEdgeMap(ValueError):
    """An edge map with no edge pixels cannot yield a distance field."""


@dataclass
class FieldTemplate:
    """Named 3D landmarks plus marking polylines."""

    landmarks: list  # [(id, np.ndarray (3,)), ...]
    polylines: list  # [(id, np.ndarray (N, 3)), ...]
    extent: tuple = (PITCH_LENGTH, PITCH_WIDTH)

    def __post_init__(self):
        self.landmarks = [(str(i), np.asarray(p, dtype=float).reshape(3))
                          for i, p in self.landmarks]
        self.polylines = [(str(i), np.asarray(p, dtype=float).reshape(-1, 3))
                          for i, p in self.polylines]
        self.validate()

    def validate(self):
        ids = [i for i, _ in self.landmarks] + [i for i, _ in self.polylines]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate landmark/polyline ids in template")
        hx, hy = self.extent[0] / 2.0, self.extent[1] / 2.0
        for i, p in self.landmarks:
            self._check_point(i, p[None], hx, hy)
        for i, pts in self.polylines:
            if len(pts) < 2:
                raise ValueError(f"polyline {i!r} needs at least 2 points")
            self._check_point(i, pts, hx, hy)

    @staticmethod
    def _check_point(ident, pts, hx, hy, margin=1e-6):
        if np.any(np.abs(pts[:, 0]) > hx + margin) or \
           np.any(np.abs(pts[:, 1]) > hy + margin):
            raise ValueError(f"{ident!r} outside pitch extent")
        if np.any(pts[:, 2] < Z_MIN) or np.any(pts[:, 2] > Z_MAX):
            raise ValueError(f"{ident!r} height outside [{Z_MIN}, {Z_MAX}]")

    # -- lookups ------------------------------------------------------------

    def landmark(self, ident):
        for i, p in self.landmarks:
            if i == ident:
                return p
        raise KeyError(f"unknown landmark {ident!r}")

    def landmark_ids(self):
        return [i for i, _ in self.landmarks]

    def all_points(self):
        """All template points as (ids, positions): landmarks + polyline vertices."""
        ids, pts = [], []
        for i, p in self.landmarks:
            ids.append(i)
            pts.append(p)
        for i, poly in self.polylines:
            for k, p in enumerate(poly):
                ids.append(f"{i}:{k:03d}")
                pts.append(p)
        return ids, np.asarray(pts)

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "v": 1,
            "extent": [float(self.extent[0]), float(self.extent[1])],
            "landmarks": [{"id": i, "xyz": [float(v) for v in p]}
                          for i, p in self.landmarks],
            "polylines": [{"id": i,
                           "points": [[float(v) for v in row] for row in pts]}
                          for i, pts in self.polylines],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            landmarks=[(lm["id"], lm["xyz"]) for lm in d["landmarks"]],
            polylines=[(pl["id"], pl["points"]) for pl in d["polylines"]],
            extent=tuple(d.get("extent", (PITCH_LENGTH, PITCH_WIDTH))),
        )


def flatten(template):
    """Landmark id -> (x, y) ground-plane coordinates (z dropped)."""
    return {i: np.array([p[0], p[1]]) for i, p in template.landmarks}


def crown_height(x, y, length=PITCH_LENGTH, width=PITCH_WIDTH,
                 crown=CROWN_HEIGHT):
    """Drainage crown: parabolic in both axes, `crown` meters at the center."""
    zx = 1.0 - (2.0 * np.asarray(x) / length) ** 2
    zy = 1.0 - (2.0 * np.asarray(y) / width) ** 2
    return crown * np.clip(zx, 0.0, None) * np.clip(zy, 0.0, None)


def default_template(length=PITCH_LENGTH, width=PITCH_WIDTH,
                     crown=CROWN_HEIGHT):
    """FIFA-typical markings: boundary, halfway, circles, boxes, arcs."""
    hx, hy = length / 2.0, width / 2.0
    pa_depth, pa_half = 16.5, 40.32 / 2.0   # penalty area
    ga_depth, ga_half = 5.5, 18.32 / 2.0    # goal area
    pen_dist, circle_r, corner_r = 11.0, 9.15, 1.0

    def lift(xy):
        xy = np.atleast_2d(xy)
        z = crown_height(xy[:, 0], xy[:, 1], length, width, crown)
        return np.column_stack([xy, z])

    landmarks = []

    def lm(ident, x, y):
        landmarks.append((ident, lift([[x, y]])[0]))

    lm("corner_nw", -hx, hy)
    lm("corner_ne", hx, hy)
    lm("corner_sw", -hx, -hy)
    lm("corner_se", hx, -hy)
    lm("halfway_touch_n", 0.0, hy)
    lm("halfway_touch_s", 0.0, -hy)
    lm("center_mark", 0.0, 0.0)
    lm("circle_halfway_n", 0.0, circle_r)
    lm("circle_halfway_s", 0.0, -circle_r)
    for side, sx in (("l", -1.0), ("r", 1.0)):
        lm(f"pa_{side}_goal_n", sx * hx, pa_half)
        lm(f"pa_{side}_goal_s", sx * hx, -pa_half)
        lm(f"pa_{side}_front_n", sx * (hx - pa_depth), pa_half)
        lm(f"pa_{side}_front_s", sx * (hx - pa_depth), -pa_half)
        lm(f"ga_{side}_goal_n", sx * hx, ga_half)
        lm(f"ga_{side}_goal_s", sx * hx, -ga_half)
        lm(f"ga_{side}_front_n", sx * (hx - ga_depth), ga_half)
        lm(f"ga_{side}_front_s", sx * (hx - ga_depth), -ga_half)
        lm(f"penalty_mark_{side}", sx * (hx - pen_dist), 0.0)
        lm(f"pen_arc_{side}_apex", sx * (hx - pen_dist - circle_r), 0.0)

    def arc(cx, cy, r, a0, a1, n):
        a = np.linspace(a0, a1, n)
        return np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a)])

    polylines = []
    polylines.append(("boundary", lift([[-hx, hy], [hx, hy], [hx, -hy],
                                        [-hx, -hy], [-hx, hy]])))
    polylines.append(("halfway", lift([[0.0, hy], [0.0, -hy]])))
    polylines.append(("center_circle",
                      lift(arc(0.0, 0.0, circle_r, 0.0, 2.0 * np.pi, 65))))
    for side, sx in (("l", -1.0), ("r", 1.0)):
        gx, fx_ = sx * hx, sx * (hx - pa_depth)
        polylines.append((f"penalty_area_{side}",
                          lift([[gx, pa_half], [fx_, pa_half],
                                [fx_, -pa_half], [gx, -pa_half]])))
        gax = sx * (hx - ga_depth)
        polylines.append((f"goal_area_{side}",
                          lift([[gx, ga_half], [gax, ga_half],
                                [gax, -ga_half], [gx, -ga_half]])))
        # penalty arc: part of the 9.15 m circle outside the penalty area
        half_span = np.arccos(np.clip((pa_depth - pen_dist) / circle_r, -1, 1))
        center_dir = 0.0 if sx < 0 else np.pi
        polylines.append((f"penalty_arc_{side}",
                          lift(arc(sx * (hx - pen_dist), 0.0, circle_r,
                                   center_dir - half_span,
                                   center_dir + half_span, 17))))
    corner_specs = [
        ("corner_arc_nw", -hx, hy, -np.pi / 2.0, 0.0),
        ("corner_arc_ne", hx, hy, np.pi, np.pi / 2.0 * 3.0),
        ("corner_arc_sw", -hx, -hy, np.pi / 2.0, 0.0),
        ("corner_arc_se", hx, -hy, np.pi / 2.0, np.pi),
    ]
    for ident, cx, cy, a0, a1 in corner_specs:
        polylines.append((ident, lift(arc(cx, cy, corner_r, a0, a1, 9))))

    return FieldTemplate(landmarks=landmarks, polylines=polylines,
                         extent=(length, width))


def sample_markings(template, spacing=0.25):
    """Points along every polyline at most `spacing` apart, endpoints included.

    Deterministic: polylines in template order, per-segment uniform subdivision
    with n = ceil(len/spacing) intervals; shared interior vertices emitted once.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    out = []
    for _, pts in template.polylines:
        for s in range(len(pts) - 1):
            a, b = pts[s], pts[s + 1]
            seg = np.linalg.norm(b - a)
            n = max(1, int(np.ceil(seg / spacing)))
            ts = np.arange(0 if s == 0 else 1, n + 1) / n
            out.append(a[None] + ts[:, None] * (b - a)[None])
    return np.concatenate(out, axis=0)


def closest_template_point(template, query_xy):
    """Nearest template point (landmark or polyline vertex) in the flat plane.

    Returns (id, xyz).  Ties break toward the lexicographically lowest id.
    """
    q = np.asarray(query_xy, dtype=float).reshape(2)
    ids, pts = template.all_points()
    d2 = np.sum((pts[:, :2] - q) ** 2, axis=1)
    best = np.flatnonzero(d2 <= d2.min() + 1e-12)
    if len(best) > 1:
        best = sorted(best, key=lambda k: ids[k])
    k = int(best[0])
    return ids[k], pts[k].copy()


# ---------------------------------------------------------------------------
# distance fields
# ---------------------------------------------------------------------------

@dataclass
class DistanceField:
    """Per-pixel exact Euclidean distance to the nearest edge pixel."""

    values: np.ndarray  # (H, W) float64

    @property
    def shape(self):
        return self.values.shape

    @property
    def border_penalty(self):
        return float(self.values.max())

    def lookup_int(self, px):
        """Nearest-pixel (rounded) lookup; out-of-image gets the border penalty."""
        px = np.atleast_2d(np.asarray(px, dtype=float))
        h, w = self.values.shape
        u = np.rint(px[:, 0]).astype(int)
        v = np.rint(px[:, 1]).astype(int)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        out = np.full(len(px), self.border_penalty)
        out[inside] = self.values[v[inside], u[inside]]
        return out

    def lookup_interp(self, px):
        """Bilinear lookup; out-of-image gets the border penalty."""
        px = np.atleast_2d(np.asarray(px, dtype=float))
        h, w = self.values.shape
        u, v = px[:, 0], px[:, 1]
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        out = np.full(len(px), self.border_penalty)
        if np.any(inside):
            ui, vi = u[inside], v[inside]
            u0 = np.clip(np.floor(ui).astype(int), 0, w - 2)
            v0 = np.clip(np.floor(vi).astype(int), 0, h - 2)
            fu = ui - u0
            fv = vi - v0
            V = self.values
            out[inside] = (V[v0, u0] * (1 - fu) * (1 - fv)
                           + V[v0, u0 + 1] * fu * (1 - fv)
                           + V[v0 + 1, u0] * (1 - fu) * fv
                           + V[v0 + 1, u0 + 1] * fu * fv)
        return out

    def lookup_clamped(self, px):
        """Bilinear lookup with queries clamped to the image rectangle.

        Continuous across the image border (constant perpendicular to it), so
        an optimizer can track points that drift slightly out of frame without
        the cost jumping to the border penalty.
        """
        px = np.atleast_2d(np.asarray(px, dtype=float))
        h, w = self.values.shape
        clamped = np.column_stack([np.clip(px[:, 0], 0.0, w - 1.0),
                                   np.clip(px[:, 1], 0.0, h - 1.0)])
        return self.lookup_interp(clamped)


def build_distance_field(edge_map):
    """Exact Euclidean distance transform of a 255/0 (or boolean) edge map."""
    edges = np.asarray(edge_map)
    if edges.ndim != 2:
        raise ValueError("edge map must be 2-D")
    mask = edges > 0
    if not np.any(mask):
        raise EmptyEdgeMap("edge map contains no edge pixels")
    return DistanceField(values=ndimage.distance_transform_edt(~mask))
