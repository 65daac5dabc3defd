"""Trajectory evaluation: G-MPJPE, PA-MPJPE, per-meter drift, track matching.

Three views of the same per-joint position error, differing only in how
much alignment freedom the prediction is granted before measuring:

- G-MPJPE: ONE similarity transform fit on all matched joints of all
  players jointly (``per_person=True`` relaxes this to one transform per
  ground-truth subject), then mean distance.  Keeps relative player
  placement in the score.
- PA-MPJPE: a fresh similarity transform per player per frame.  Pure pose
  accuracy; trajectories and relative placement are aligned away.
- Per-meter drift: G-MPJPE in cm divided by the mean matched ground-truth
  trajectory length in meters.

Predictions are matched to ground truth the way broadcast evaluations have
to be: per-frame greedy IoU on 2D boxes, a majority vote per predicted
track, and time-disjoint merging of fragments that vote for the same
subject.  Metrics are computed only where both sides have the subject, on
a reduced joint subset (nose + limbs; eyes and ears are the flaky ones).

World units are meters throughout; reported errors are mm (drift: cm/m).
"""

from dataclasses import dataclass, field as _field

import numpy as np

from .skeleton import EVAL_JOINTS, LEFT_HIP, RIGHT_HIP

__all__ = [
    "DegenerateConfiguration",
    "MetricsReport",
    "NoOverlap",
    "TrackCorrespondence",
    "ZeroLength",
    "apply_similarity",
    "count_identity_switches",
    "evaluate",
    "g_mpjpe",
    "keypoint_boxes",
    "match_tracks",
    "pa_mpjpe",
    "per_meter_drift",
    "procrustes",
    "trajectory_length",
]


class DegenerateConfiguration(ValueError):
    """Point cloud too small or too flat for a unique alignment."""


class NoOverlap(ValueError):
    """No (track, frame) pair is present on both sides."""


class ZeroLength(ValueError):
    """Drift denominator: ground-truth trajectories have no length."""


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def procrustes(source, target, with_scale=True):
    """Closed-form similarity transform minimizing ||s R x + t - y||^2.

    Returns ``(s, R, t)`` with det(R) = +1 (reflections are repaired via
    the smallest singular direction).  ``with_scale=False`` pins s = 1.
    Raises DegenerateConfiguration for fewer than 3 points or a cloud with
    (near-)collinear spread, where the rotation is not unique.
    """
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"point clouds must both be (N, 3), "
                         f"got {X.shape} and {Y.shape}")
    n = len(X)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 points, got {n}")
    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    spread = np.linalg.svd(Xc, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1.0):
        raise DegenerateConfiguration(
            "source points are (near-)collinear; rotation is not unique")

    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[2] = -1.0
    R = U @ np.diag(sign) @ Vt
    if with_scale:
        var_x = (Xc ** 2).sum() / n
        s = float(D @ sign) / var_x
    else:
        s = 1.0
    t = mu_y - s * R @ mu_x
    return s, R, t


def apply_similarity(transform, points):
    s, R, t = transform
    return s * np.asarray(points, dtype=float) @ R.T + t


# ---------------------------------------------------------------------------
# correspondence between predicted and ground-truth tracks
# ---------------------------------------------------------------------------

@dataclass
class TrackCorrespondence:
    """Outcome of the greedy box-matching protocol."""

    pred_to_gt: dict                 # pred track id -> gt track id
    merged: dict                     # gt track id -> sorted [pred ids]
    frame_matches: dict = _field(default_factory=dict)
    # frame -> [(pred id, gt id, iou)], the raw per-frame greedy matches

    def to_dict(self):
        return {
            "pred_to_gt": {str(k): v for k, v in self.pred_to_gt.items()},
            "merged": {str(k): v for k, v in self.merged.items()},
        }


def _box_iou(a, b):
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[2], b[2])
    y1 = min(a[3], b[3])
    if x1 <= x0 or y1 <= y0:
        return 0.0
    inter = (x1 - x0) * (y1 - y0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def match_tracks(pred_boxes, gt_boxes, *, iou_threshold=0.5):
    """Associate predicted tracks with ground-truth tracks via 2D boxes.

    ``pred_boxes`` / ``gt_boxes``: {track id: {frame: (4,) [x0, y0, x1, y1]}}.
    Per frame, pairs are matched greedily by descending IoU (each box used
    once, pairs below ``iou_threshold`` discarded).  Each predicted track
    then votes for the ground-truth identity it matched most often, and
    fragments voting for the same subject are merged; trackers that lose a
    player on re-entry produce such fragments, and scoring them separately
    would punish the re-acquisition rather than the pose.
    """
    frame_matches = {}
    frames = sorted({f for t in pred_boxes.values() for f in t}
                    & {f for t in gt_boxes.values() for f in t})
    for f in frames:
        preds = [(pid, boxes[f]) for pid, boxes in sorted(pred_boxes.items())
                 if f in boxes]
        gts = [(gid, boxes[f]) for gid, boxes in sorted(gt_boxes.items())
               if f in boxes]
        scored = []
        for i, (pid, pb) in enumerate(preds):
            for j, (gid, gb) in enumerate(gts):
                iou = _box_iou(pb, gb)
                if iou >= iou_threshold:
                    scored.append((iou, i, j))
        scored.sort(key=lambda e: (-e[0], e[1], e[2]))
        used_p, used_g, matches = set(), set(), []
        for iou, i, j in scored:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            matches.append((preds[i][0], gts[j][0], iou))
        if matches:
            frame_matches[f] = matches

    votes = {}
    for matches in frame_matches.values():
        for pid, gid, _ in matches:
            votes.setdefault(pid, {}).setdefault(gid, 0)
            votes[pid][gid] += 1
    pred_to_gt = {}
    for pid, counts in votes.items():
        best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
        pred_to_gt[pid] = best[0]
    merged = {}
    for pid, gid in sorted(pred_to_gt.items()):
        merged.setdefault(gid, []).append(pid)
    return TrackCorrespondence(pred_to_gt=pred_to_gt, merged=merged,
                               frame_matches=frame_matches)


def keypoint_boxes(tracks, camera, *, min_joints=2):
    """Project tracks and return {id: {frame: tight keypoint box}}."""
    out = {}
    for tr in tracks:
        boxes = {}
        for f in tr.frames():
            pose = tr.poses[f]
            px, ok = camera.project_masked(pose.joints)
            ok = ok & pose.valid
            if ok.sum() < min_joints:
                continue
            pts = px[ok]
            boxes[f] = np.array([pts[:, 0].min(), pts[:, 1].min(),
                                 pts[:, 0].max(), pts[:, 1].max()])
        if boxes:
            out[tr.id] = boxes
    return out


def count_identity_switches(correspondence):
    """Times a ground-truth subject's assigned predicted id changes.

    Counted over the raw per-frame matches, before fragment merging, the
    way tracking benchmarks do: a subject handed from one predicted track
    to another is one switch, gaps do not reset the memory.
    """
    last = {}
    switches = 0
    for f in sorted(correspondence.frame_matches):
        for pid, gid, _ in correspondence.frame_matches[f]:
            if gid in last and last[gid] != pid:
                switches += 1
            last[gid] = pid
    return switches


# ---------------------------------------------------------------------------
# metric computation
# ---------------------------------------------------------------------------

def _track_map(tracks):
    if isinstance(tracks, dict):
        return tracks
    return {tr.id: tr for tr in tracks}


def _normalize_correspondence(correspondence, pred_ids, gt_ids):
    if correspondence is None:
        return {i: i for i in pred_ids if i in gt_ids}
    if isinstance(correspondence, TrackCorrespondence):
        return dict(correspondence.pred_to_gt)
    return dict(correspondence)


def _gather(pred_tracks, gt_tracks, pred_to_gt, joints):
    """Collect matched joint rows: {gt id: [(frame, P, G, ok), ...]}.

    P and G are (S, 3) on the joint subset; ok marks rows valid on both
    sides.  Fragments merged onto one subject contribute time-disjointly;
    on a frame conflict the lower predicted id wins.
    """
    pred = _track_map(pred_tracks)
    gt = _track_map(gt_tracks)
    joints = np.asarray(joints)
    gathered = {}
    for pid in sorted(pred_to_gt):
        gid = pred_to_gt[pid]
        if pid not in pred or gid not in gt:
            continue
        ptr, gtr = pred[pid], gt[gid]
        rows = gathered.setdefault(gid, {})
        for f in ptr.frames():
            if f not in gtr.poses or f in rows:
                continue
            pp, gp = ptr.poses[f], gtr.poses[f]
            ok = pp.valid[joints] & gp.valid[joints]
            if not ok.any():
                continue
            rows[f] = (pp.joints[joints], gp.joints[joints], ok)
    return {gid: [(f,) + rows[f] for f in sorted(rows)]
            for gid, rows in gathered.items() if rows}


def _stack(entries):
    P = np.concatenate([p[ok] for _, p, g, ok in entries])
    G = np.concatenate([g[ok] for _, p, g, ok in entries])
    return P, G


def _aligned_error_mm(P, G, with_scale):
    transform = procrustes(P, G, with_scale=with_scale)
    d = np.linalg.norm(apply_similarity(transform, P) - G, axis=1)
    return 1000.0 * d, transform


def g_mpjpe(pred_tracks, gt_tracks, correspondence=None, *,
            per_person=False, with_scale=True, joints=None):
    """Global MPJPE in mm; see the module docstring for the alignment."""
    report = evaluate(pred_tracks, gt_tracks, correspondence,
                      per_person=per_person, with_scale=with_scale,
                      joints=joints, skip_pa=True)
    return report.g_mpjpe_mm


def pa_mpjpe(pred_tracks, gt_tracks, correspondence=None, *,
             with_scale=True, joints=None):
    """Procrustes-aligned MPJPE in mm (fresh transform per player-frame)."""
    report = evaluate(pred_tracks, gt_tracks, correspondence,
                      with_scale=with_scale, joints=joints)
    return report.pa_mpjpe_mm


def per_meter_drift(g_mpjpe_mm, lengths_m):
    """(G-MPJPE in cm) / (mean ground-truth trajectory length in m)."""
    lengths = np.atleast_1d(np.asarray(lengths_m, dtype=float))
    mean_len = lengths.mean() if lengths.size else 0.0
    if mean_len <= 0:
        raise ZeroLength("ground-truth trajectories have zero total length")
    return (g_mpjpe_mm / 10.0) / mean_len


def trajectory_length(track, frames=None):
    """Mid-hip path length in meters over the given (default: all) frames."""
    frames = sorted(track.poses) if frames is None else sorted(frames)
    roots = []
    for f in frames:
        pose = track.poses.get(f)
        if pose is None:
            continue
        if pose.valid[LEFT_HIP] and pose.valid[RIGHT_HIP]:
            roots.append(0.5 * (pose.joints[LEFT_HIP]
                                + pose.joints[RIGHT_HIP]))
    if len(roots) < 2:
        return 0.0
    roots = np.asarray(roots)
    return float(np.linalg.norm(np.diff(roots, axis=0), axis=1).sum())


@dataclass
class MetricsReport:
    """Aggregate scores plus the intermediates they are reproducible from."""

    g_mpjpe_mm: float
    pa_mpjpe_mm: float
    drift_cm_per_m: float
    per_track: dict          # gt id -> {"g_mpjpe_mm", "pa_mpjpe_mm",
    #                          "length_m", "frames", "joints", "pred_ids"}
    matched_frames: int      # (subject, frame) pairs evaluated
    joint_subset: list
    alignment: dict          # mode / with_scale / fitted transform(s)

    def to_dict(self):
        return {
            "v": 1,
            "g_mpjpe_mm": self.g_mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            "drift_cm_per_m": self.drift_cm_per_m,
            "matched_frames": self.matched_frames,
            "joint_subset": [int(j) for j in self.joint_subset],
            "alignment": _jsonify(self.alignment),
            "per_track": {str(k): _jsonify(v)
                          for k, v in sorted(self.per_track.items())},
        }


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _transform_dict(transform):
    s, R, t = transform
    return {"scale": float(s), "rotation": R.tolist(), "translation":
            t.tolist()}


def evaluate(pred_tracks, gt_tracks, correspondence=None, *,
             per_person=False, with_scale=True, joints=None, skip_pa=False):
    """Full evaluation; the single code path all metric entry points use.

    ``correspondence`` may be a TrackCorrespondence, a {pred id: gt id}
    dict, or None (match by id).  Raises NoOverlap when nothing matches.
    PA-MPJPE skips player-frames with fewer than 3 jointly-valid subset
    joints (a per-frame alignment needs that many); G-MPJPE uses them.
    """
    pred = _track_map(pred_tracks)
    gt = _track_map(gt_tracks)
    joints = EVAL_JOINTS if joints is None else list(joints)
    pred_to_gt = _normalize_correspondence(correspondence, pred.keys(),
                                           gt.keys())
    gathered = _gather(pred, gt, pred_to_gt, joints)
    if not gathered:
        raise NoOverlap("no (track, frame) pair exists on both sides")

    alignment = {"mode": "per_person" if per_person else "shared",
                 "with_scale": bool(with_scale)}
    per_track = {
        gid: {
            "frames": len(entries),
            "joints": int(sum(ok.sum() for _, _, _, ok in entries)),
            "length_m": trajectory_length(gt[gid],
                                          [f for f, _, _, _ in entries]),
            "pred_ids": sorted(p for p, g in pred_to_gt.items() if g == gid),
        }
        for gid, entries in gathered.items()
    }

    if per_person:
        errs = []
        transforms = {}
        for gid, entries in gathered.items():
            d, transform = _aligned_error_mm(*_stack(entries), with_scale)
            per_track[gid]["g_mpjpe_mm"] = float(d.mean())
            transforms[str(gid)] = _transform_dict(transform)
            errs.append(d)
        g_mm = float(np.concatenate(errs).mean())
        alignment["transforms"] = transforms
    else:
        all_entries = [e for entries in gathered.values() for e in entries]
        P, G = _stack(all_entries)
        d_all, transform = _aligned_error_mm(P, G, with_scale)
        g_mm = float(d_all.mean())
        alignment["transform"] = _transform_dict(transform)
        for gid, entries in gathered.items():
            Pt, Gt = _stack(entries)
            d = np.linalg.norm(apply_similarity(transform, Pt) - Gt, axis=1)
            per_track[gid]["g_mpjpe_mm"] = float(1000.0 * d.mean())

    pa_mm = float("nan")
    if not skip_pa:
        pa_all = []
        for gid, entries in gathered.items():
            frame_errs = []
            for _, p, g, ok in entries:
                if ok.sum() < 3:
                    continue
                try:
                    d, _ = _aligned_error_mm(p[ok], g[ok], with_scale)
                except DegenerateConfiguration:
                    continue
                frame_errs.append(d)
            if frame_errs:
                per_track[gid]["pa_mpjpe_mm"] = float(
                    np.concatenate(frame_errs).mean())
                pa_all.extend(frame_errs)
        pa_mm = (float(np.concatenate(pa_all).mean()) if pa_all
                 else float("nan"))

    lengths = [per_track[gid]["length_m"] for gid in gathered]
    try:
        drift = per_meter_drift(g_mm, lengths)
    except ZeroLength:
        drift = float("nan")

    return MetricsReport(
        g_mpjpe_mm=g_mm, pa_mpjpe_mm=pa_mm, drift_cm_per_m=drift,
        per_track=per_track,
        matched_frames=sum(len(e) for e in gathered.values()),
        joint_subset=list(joints), alignment=alignment)
