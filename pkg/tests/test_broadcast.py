"""Broadcast clip calibration: matching, optimization, overlay, formats."""

import itertools
import json

import numpy as np
import pytest

from pitchcap.body import default_body_model
from pitchcap.broadcast import (
    BroadcastSequence,
    BroadcastWeights,
    DivergenceDetected,
    FrameObservations,
    FrameOutOfRange,
    MatchResult,
    MissingInit,
    _bind_player,
    _densify,
    _FrameEval,
    _modified_z_keep,
    _PlayerTerm,
    _projection_block,
    calibrate_clip,
    match_players,
    read_broadcast_json,
    read_observations_jsonl,
    reproject_overlay,
    write_broadcast_json,
    write_observations_jsonl,
)
from pitchcap.field import default_template, sample_markings
from pitchcap.geometry import (
    look_at_rotation,
    matrix_to_quat,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
    rotation_geodesic_deg,
)
from pitchcap.mocap import Detection2D, SkeletonPose, Track
from pitchcap.skeleton import COCO_TREE, N_JOINTS
from pitchcap.solver import (
    LeastSquaresProblem,
    RobustKernel,
    SolveConfig,
    check_jacobians,
)

W, H = 1920, 1080
CENTER = np.array([0.0, -45.0, 18.0])

TEMPLATE = default_template()
TPL_IDS, TPL_PTS = TEMPLATE.all_points()

_model = default_body_model()
STAND = _model.regressor @ _model.template
STAND = STAND - [0.0, 0.0, STAND[:, 2].min()]  # feet on the ground plane


def make_truth(n_frames, f0=2000.0, f1=6000.0, x0=-25.0, x1=40.0):
    """Pan-zoom ground truth: fixed mount, sweep toward the penalty area."""
    if n_frames == 1:
        focal = np.array([(f0 + f1) / 2.0])
        targets = np.array([(x0 + x1) / 2.0])
    else:
        focal = np.linspace(f0, f1, n_frames)
        targets = np.linspace(x0, x1, n_frames)
    quats = [matrix_to_quat(look_at_rotation(CENTER, (targets[t], 0.0, 0.0)))
             for t in range(n_frames)]
    return BroadcastSequence(
        clip="test-clip", center=CENTER, focal=focal,
        principal=np.tile([959.5, 539.5], (n_frames, 1)),
        dist=np.tile([-0.05, 0.01, 0.0], (n_frames, 1)),
        rotation_quat_wxyz=np.stack(quats), image_size=(W, H))


def walking_tracks(n_frames, n_players, rng, lo=(-20, -12), hi=(36, 12)):
    pos = rng.uniform(lo, hi, size=(n_players, 2))
    vel = rng.uniform(-0.1, 0.1, size=(n_players, 2))
    return {t: [STAND + [pos[p, 0] + vel[p, 0] * t, pos[p, 1] + vel[p, 1] * t, 0]
                for p in range(n_players)]
            for t in range(n_frames)}


def exact_observations(truth, tracks, n_field=15, px_sigma=0.0, rng=None):
    """Project template points and players through the truth cameras."""
    obs = {}
    for t in range(truth.n_frames):
        cam = truth.camera(t)
        px, valid = cam.project_masked(TPL_PTS)
        idx = np.flatnonzero(valid & cam.in_image(px))
        if len(idx) > n_field:
            idx = idx[np.linspace(0, len(idx) - 1, n_field).astype(int)]
        noise = (rng.normal(0.0, px_sigma, (len(idx), 2))
                 if px_sigma else np.zeros((len(idx), 2)))
        field = [(TPL_IDS[i], px[i] + noise[j]) for j, i in enumerate(idx)]
        dets = []
        for kp in tracks.get(t, []) if tracks else []:
            dpx, dv = cam.project_masked(kp)
            if np.all(dv) and np.all(cam.in_image(dpx)):
                joints = np.concatenate([dpx, np.ones((N_JOINTS, 1))], axis=1)
                dets.append(Detection2D(frame=t, camera="broadcast",
                                        joints=joints))
        obs[t] = FrameObservations(frame=t, field_points=field, players=dets)
    return obs


def perturbed_init(truth, rng, rot_deg=1.0, f_rel=0.05):
    quats = []
    for t in range(truth.n_frames):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dq = quat_from_axis_angle(axis * np.deg2rad(rot_deg))
        quats.append(quat_mul(dq, truth.rotation_quat_wxyz[t]))
    return BroadcastSequence(
        clip=truth.clip, center=truth.center.copy(),
        focal=truth.focal * (1 + f_rel * rng.choice([-1, 1], truth.n_frames)),
        principal=truth.principal.copy(), dist=truth.dist.copy(),
        rotation_quat_wxyz=np.stack(quats), image_size=truth.image_size)


def rotation_errors_deg(seq, truth):
    return [rotation_geodesic_deg(quat_to_matrix(seq.rotation_quat_wxyz[t]),
                                  quat_to_matrix(truth.rotation_quat_wxyz[t]))
            for t in range(truth.n_frames)]


def player_reprojection_error(seq, truth, tracks):
    """Mean px distance between player joints under truth vs given cameras."""
    errs = []
    for t in range(seq.n_frames):
        cam, cam_t = seq.camera(t), truth.camera(t)
        for kp in tracks.get(t, []):
            p1, v1 = cam.project_masked(kp)
            p0, v0 = cam_t.project_masked(kp)
            m = v0 & v1 & cam_t.in_image(p0)
            if np.any(m):
                errs.append(np.linalg.norm(p1[m] - p0[m], axis=1).mean())
    return float(np.mean(errs))


def thin_field_frame(seed):
    """Single frame with two clustered markings and a spread player grid."""
    rng = np.random.default_rng(seed)
    truth = make_truth(1, f0=3500, f1=3500, x0=5, x1=5)
    gx, gy = np.meshgrid([-8.0, 0.0, 8.0, 16.0], [-9.0, 0.0, 9.0])
    grid = np.stack([gx.ravel(), gy.ravel()], 1)[:8]
    grid = grid + rng.uniform(-1.5, 1.5, grid.shape)
    tracks = {0: [STAND + [g[0], g[1], 0.0] for g in grid]}
    cam = truth.camera(0)
    near_circle = np.argsort(
        np.sum((TPL_PTS[:, :2] - [0.0, 9.15]) ** 2, axis=1))[:2]
    px, valid = cam.project_masked(TPL_PTS)
    field = [(TPL_IDS[i], px[i]) for i in near_circle if valid[i]]
    dets = []
    for kp in tracks[0]:
        dpx, dv = cam.project_masked(kp)
        if np.all(dv) and np.all(cam.in_image(dpx)):
            dets.append(Detection2D(
                frame=0, camera="broadcast",
                joints=np.concatenate([dpx, np.ones((N_JOINTS, 1))], axis=1)))
    obs = {0: FrameObservations(frame=0, field_points=field, players=dets)}
    init = perturbed_init(truth, rng, rot_deg=0.4, f_rel=0.02)
    return truth, tracks, obs, init


# ---------------------------------------------------------------------------
# sequence type + serialization
# ---------------------------------------------------------------------------

class TestBroadcastSequence:
    def test_camera_assembly_matches_manual(self):
        seq = make_truth(3)
        cam = seq.camera(1)
        R = quat_to_matrix(seq.rotation_quat_wxyz[1])
        x = np.array([5.0, 3.0, 0.0])
        expected = x @ R.T - (R @ seq.center) @ np.eye(3)
        np.testing.assert_allclose(x @ cam.R.T + cam.translation, expected,
                                   atol=1e-12)

    def test_center_shared_across_frames(self):
        seq = make_truth(5)
        for t in range(5):
            np.testing.assert_allclose(seq.camera(t).center, CENTER,
                                       atol=1e-9)

    def test_frame_out_of_range(self):
        seq = make_truth(3)
        with pytest.raises(FrameOutOfRange):
            seq.camera(3)
        with pytest.raises(FrameOutOfRange):
            seq.camera(-1)

    def test_rejects_denormalized_quaternion(self):
        with pytest.raises(ValueError, match="quaternion norm"):
            BroadcastSequence(clip="x", center=CENTER, focal=[3000.0],
                              principal=[[959.5, 539.5]],
                              dist=[[0.0, 0.0, 0.0]],
                              rotation_quat_wxyz=[[1.0, 1.0, 0.0, 0.0]])

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError, match="focal"):
            BroadcastSequence(clip="x", center=CENTER, focal=[-10.0],
                              principal=[[959.5, 539.5]],
                              dist=[[0.0, 0.0, 0.0]],
                              rotation_quat_wxyz=[[1.0, 0.0, 0.0, 0.0]])

    def test_json_round_trip(self, tmp_path):
        seq = make_truth(4)
        path = tmp_path / "seq.json"
        write_broadcast_json(path, seq)
        back = read_broadcast_json(path)
        assert back.clip == seq.clip
        np.testing.assert_allclose(back.center, seq.center, atol=1e-12)
        np.testing.assert_allclose(back.focal, seq.focal, atol=1e-12)
        np.testing.assert_allclose(back.rotation_quat_wxyz,
                                   seq.rotation_quat_wxyz, atol=1e-12)
        d = json.loads(path.read_text())
        assert set(d) == {"v", "clip", "image_size", "C", "frames"}
        assert set(d["frames"][0]) == {"f", "principal", "k",
                                       "rotation_quat_wxyz"}


class TestFrameObservations:
    def test_resolves_named_and_explicit_refs(self):
        name = TPL_IDS[0]
        fo = FrameObservations(frame=0, field_points=[
            (name, (100.0, 200.0)),
            ([3.0, 4.0, 0.0], (300.0, 400.0)),
        ])
        X, px = fo.resolve_field(TEMPLATE)
        np.testing.assert_allclose(X[0], TPL_PTS[0], atol=1e-12)
        np.testing.assert_allclose(X[1], [3.0, 4.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(px, [[100, 200], [300, 400]], atol=1e-12)

    def test_unknown_ref_raises(self):
        fo = FrameObservations(frame=0,
                               field_points=[("no_such_point", (0.0, 0.0))])
        with pytest.raises(KeyError, match="no_such_point"):
            fo.resolve_field(TEMPLATE)

    def test_named_ref_without_template_raises(self):
        fo = FrameObservations(frame=0, field_points=[("corner", (0.0, 0.0))])
        with pytest.raises(ValueError, match="template"):
            fo.resolve_field(None)

    def test_validate_rejects_out_of_bounds(self):
        fo = FrameObservations(frame=2,
                               field_points=[("x", (5000.0, 100.0))])
        with pytest.raises(ValueError, match="outside"):
            fo.validate((W, H))

    def test_jsonl_round_trip(self, tmp_path):
        det = Detection2D(frame=1, camera="broadcast",
                          joints=np.column_stack([np.full(17, 10.0),
                                                  np.full(17, 20.0),
                                                  np.ones(17)]))
        obs = [
            FrameObservations(frame=0, field_points=[(TPL_IDS[0], (1.0, 2.0))],
                              flow=[([1.0, 2.0, 0.0], (3.0, 4.0))]),
            FrameObservations(frame=1, players=[det]),
        ]
        path = tmp_path / "obs.jsonl"
        write_observations_jsonl(path, obs)
        back = read_observations_jsonl(path)
        assert sorted(back) == [0, 1]
        assert back[0].field_points[0][0] == TPL_IDS[0]
        np.testing.assert_allclose(back[0].flow[0][0], [1, 2, 0], atol=1e-12)
        np.testing.assert_allclose(back[1].players[0].joints,
                                   det.joints, atol=1e-12)


# ---------------------------------------------------------------------------
# player matching
# ---------------------------------------------------------------------------

class TestMatchPlayers:
    def test_identical_skeletons_similarity_one(self):
        cam = make_truth(1).camera(0)
        px, _ = cam.project_masked(STAND + [5.0, 0.0, 0.0])
        result = match_players([px], [px])
        assert len(result.pairs) == 1
        assert result.pairs[0][:2] == (0, 0)
        assert result.pairs[0][2] == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_boxes_unmatched(self):
        cam = make_truth(1).camera(0)
        a, _ = cam.project_masked(STAND + [-15.0, 0.0, 0.0])
        b, _ = cam.project_masked(STAND + [15.0, 0.0, 0.0])
        result = match_players([a], [b])
        assert result.pairs == []

    def test_ten_noisy_matches_exhaustive_oracle(self):
        # players big enough in the image that 2 px of noise cannot push a
        # correct pair's similarity below the acceptance threshold
        rng = np.random.default_rng(20260823)
        cam = make_truth(1, f0=4500, f1=4500, x0=7, x1=7).camera(0)
        gx, gy = np.meshgrid([-2.0, 3.5, 9.0, 14.5, 20.0], [-5.0, 5.0])
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        centers = centers + rng.uniform(-1.0, 1.0, centers.shape)
        proj = [cam.project_masked(STAND + [c[0], c[1], 0.0])[0]
                for c in centers]
        dets = [p + rng.normal(0.0, 2.0, p.shape) for p in proj]
        result = match_players(proj, dets)
        assert len(result.pairs) == 10
        assert all(i == j for i, j, _ in result.pairs)

        sims = np.zeros((10, 10))
        for i in range(10):
            for j in range(10):
                probe = match_players([proj[i]], [dets[j]], min_sim=-np.inf)
                sims[i, j] = probe.pairs[0][2]
        best = max(sum(sims[i, p[i]] for i in range(10))
                   for p in itertools.permutations(range(10)))
        assert result.total_similarity() == pytest.approx(best, abs=1e-9)

    def test_unbalanced_sides(self):
        cam = make_truth(1).camera(0)
        proj = [cam.project_masked(STAND + [x, 0.0, 0.0])[0]
                for x in (-5.0, 5.0, 15.0)]
        result = match_players(proj, proj[:2])
        assert len(result.pairs) == 2
        assert result.n_projected == 3 and result.n_detections == 2

    def test_empty_side_allowed(self):
        cam = make_truth(1).camera(0)
        px, _ = cam.project_masked(STAND)
        assert match_players([], [px]).pairs == []
        assert match_players([px], []).pairs == []

    def test_match_result_rejects_duplicates(self):
        with pytest.raises(ValueError, match="one-to-one"):
            MatchResult([(0, 0, 0.9), (1, 0, 0.8)])


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

class TestCalibrateClip:
    def test_analytic_jacobians_match_numeric(self):
        rng = np.random.default_rng(4)
        truth = make_truth(1, f0=3000, f1=3000, x0=0, x1=0)
        tracks = {0: [STAND + [3.0, 2.0, 0.0], STAND + [-6.0, -4.0, 0.0]]}
        obs = exact_observations(truth, tracks, n_field=8)
        init = perturbed_init(truth, rng, rot_deg=0.5, f_rel=0.03)

        problem = LeastSquaresProblem()
        problem.add_parameter_block("0/f", np.array([init.focal[0]]))
        problem.add_parameter_block("0/c", init.principal[0].copy())
        problem.add_parameter_block("0/k", init.dist[0].copy())
        problem.add_parameter_block("0/q", init.rotation_quat_wxyz[0].copy(),
                                    manifold="quaternion")
        problem.add_parameter_block("C", init.center.copy())
        names = ["0/f", "0/c", "0/k", "0/q", "C"]

        X, px = obs[0].resolve_field(TEMPLATE)
        joints = np.stack(tracks[0])
        stacked = np.concatenate([X, joints.reshape(-1, 3)])
        cache = _FrameEval("jc", (W, H), stacked)
        fn, jac, dim = _projection_block(cache, np.arange(len(X)), px)
        problem.add_residual_block(fn, names, dim, jac=jac,
                                   kernel=RobustKernel("geman_mcclure", 4.0),
                                   chunk=2)
        term = _PlayerTerm(joints, np.ones(joints.shape[:2], dtype=bool),
                           obs[0].players)
        sel = np.arange(len(X), len(stacked))
        _, ppx, pv = cache.project(*[problem.values(n) for n in names])
        term.rematch(ppx[sel], pv[sel], 0.1)
        fn_p, jac_p = _bind_player(cache, sel, term)
        problem.add_residual_block(fn_p, names, 2 * len(sel), jac=jac_p,
                                   kernel=RobustKernel("geman_mcclure", 8.0),
                                   chunk=2)
        assert check_jacobians(problem, rtol=1e-4) < 1e-4

    def test_pan_zoom_recovery(self):
        rng = np.random.default_rng(3)
        truth = make_truth(12)
        tracks = walking_tracks(12, 6, rng)
        obs = exact_observations(truth, tracks)
        init = perturbed_init(truth, rng)

        out, report = calibrate_clip(
            init, obs, tracks, TEMPLATE,
            config=SolveConfig(first_order_iterations=1200))

        assert report.final_cost < report.initial_cost * 1e-3
        f_err = np.abs(out.focal - truth.focal) / truth.focal
        assert f_err.max() < 1e-3          # within 0.1 %
        assert max(rotation_errors_deg(out, truth)) < 0.05
        assert np.linalg.norm(out.center - truth.center) < 0.02  # 2 cm

        # recovered calibration reprojects the markings through the whole
        # sweep to sub-pixel mean deviation
        marks = sample_markings(TEMPLATE, spacing=1.0)
        devs = []
        for t in range(truth.n_frames):
            cam_t, cam_r = truth.camera(t), out.camera(t)
            p0, v0 = cam_t.project_masked(marks)
            p1, v1 = cam_r.project_masked(marks)
            m = v0 & v1 & cam_t.in_image(p0)
            devs.append(np.linalg.norm(p0[m] - p1[m], axis=1).mean())
        assert np.mean(devs) < 1.0

    def test_player_term_rescues_thin_field_frame(self):
        # a frame seeing only two clustered markings cannot be pinned by the
        # field term alone; the matched-player term supplies the rest
        for seed in (500, 501, 502):
            truth, tracks, obs, init = thin_field_frame(seed)
            cfg = SolveConfig(first_order_iterations=2000)
            joint, _ = calibrate_clip(init, obs, tracks, TEMPLATE, config=cfg)
            field_only, _ = calibrate_clip(
                init, obs, tracks, TEMPLATE,
                BroadcastWeights(player_weight=0.0), config=cfg)
            e_joint = player_reprojection_error(joint, truth, tracks)
            e_field = player_reprojection_error(field_only, truth, tracks)
            assert e_joint < 1.0
            assert e_field > e_joint

    def test_smoothness_reduces_focal_total_variation(self):
        rng = np.random.default_rng(5)
        truth = make_truth(10)
        tracks = walking_tracks(10, 6, rng)
        obs = exact_observations(truth, tracks, n_field=12, px_sigma=1.5,
                                 rng=rng)
        init = perturbed_init(truth, rng)
        cfg = SolveConfig(first_order_iterations=800)
        rough, _ = calibrate_clip(init, obs, tracks, TEMPLATE,
                                  BroadcastWeights(smooth_weight=0.0),
                                  config=cfg)
        smooth, _ = calibrate_clip(init, obs, tracks, TEMPLATE,
                                   BroadcastWeights(smooth_weight=0.01),
                                   config=cfg)
        tv = lambda f: np.abs(np.diff(f)).sum()
        assert tv(smooth.focal) < tv(rough.focal)

    def test_flow_term_with_outlier_rejection(self):
        rng = np.random.default_rng(11)
        truth = make_truth(3, f0=3000, f1=3600, x0=-10, x1=10)
        obs = {}
        for t in range(3):
            cam = truth.camera(t)
            px, valid = cam.project_masked(TPL_PTS)
            idx = np.flatnonzero(valid & cam.in_image(px))
            idx = idx[np.linspace(0, len(idx) - 1, 20).astype(int)]
            entries = [(TPL_IDS[i], px[i].copy()) for i in idx]
            if t == 1:  # two grossly wrong matches, still inside the image
                for slot, off in ((3, [300.0, -250.0]), (7, [-280.0, 90.0])):
                    ref, p = entries[slot]
                    entries[slot] = (ref, np.clip(p + off, 0, [W - 1, H - 1]))
            obs[t] = FrameObservations(frame=t, flow=entries)
        init = perturbed_init(truth, rng, rot_deg=0.3, f_rel=0.02)
        out, _ = calibrate_clip(init, obs, None, TEMPLATE,
                                BroadcastWeights(flow_weight=1.0),
                                config=SolveConfig(first_order_iterations=1500))
        assert max(rotation_errors_deg(out, truth)) < 0.05
        assert (np.abs(out.focal - truth.focal) / truth.focal).max() < 5e-3

    def test_modified_z_score_gate(self):
        norms = np.array([1.0, 1.1, 0.9, 1.05, 0.95, 1.2, 0.8, 50.0, 1.0])
        keep = _modified_z_keep(norms)
        assert not keep[7]
        assert keep.sum() == 8
        # degenerate spread: everything kept
        assert _modified_z_keep(np.ones(5)).all()

    def test_rematch_unchanged_assignment_keeps_cost(self):
        truth = make_truth(1, f0=3000, f1=3000, x0=0, x1=0)
        tracks = {0: [STAND + [3.0, 2.0, 0.0], STAND + [-6.0, -4.0, 0.0]]}
        obs = exact_observations(truth, tracks, n_field=0)
        joints = np.stack(tracks[0])
        problem = LeastSquaresProblem()
        problem.add_parameter_block("0/f", np.array([truth.focal[0] * 1.02]))
        problem.add_parameter_block("0/c", truth.principal[0].copy())
        problem.add_parameter_block("0/k", truth.dist[0].copy())
        problem.add_parameter_block("0/q",
                                    truth.rotation_quat_wxyz[0].copy(),
                                    manifold="quaternion")
        problem.add_parameter_block("C", truth.center.copy())
        names = ["0/f", "0/c", "0/k", "0/q", "C"]
        cache = _FrameEval("rm", (W, H), joints.reshape(-1, 3))
        term = _PlayerTerm(joints, np.ones(joints.shape[:2], dtype=bool),
                           obs[0].players)
        sel = np.arange(joints.shape[0] * joints.shape[1])
        fn, jac = _bind_player(cache, sel, term)
        problem.add_residual_block(fn, names, 2 * len(sel), jac=jac,
                                   kernel=RobustKernel("geman_mcclure", 8.0),
                                   chunk=2)
        vals = [problem.values(n) for n in names]
        _, px, valid = cache.project(*vals)
        # side-view skeletons project to boxes a few px wide, so keep the
        # acceptance threshold permissive; this test is about purity, not
        # matching quality
        assert term.rematch(px[sel], valid[sel], 0.1)  # initial association
        cost_before = problem.cost()
        assert not term.rematch(px[sel], valid[sel], 0.1)  # unchanged
        assert problem.cost() == pytest.approx(cost_before, abs=1e-9)
        term.set_assignment({})  # dropped pairs change the objective
        assert problem.cost() == pytest.approx(0.0, abs=1e-12)

    def test_runs_are_deterministic(self):
        truth = make_truth(2, f0=2800, f1=3400, x0=-5, x1=10)
        rng = np.random.default_rng(9)
        tracks = walking_tracks(2, 4, rng)
        obs = exact_observations(truth, tracks, n_field=10)
        init = perturbed_init(truth, rng, rot_deg=0.5, f_rel=0.03)
        cfg = SolveConfig(first_order_iterations=300)
        a, _ = calibrate_clip(init, obs, tracks, TEMPLATE, config=cfg)
        b, _ = calibrate_clip(init, obs, tracks, TEMPLATE, config=cfg)
        assert np.array_equal(a.focal, b.focal)
        assert np.array_equal(a.rotation_quat_wxyz, b.rotation_quat_wxyz)
        assert np.array_equal(a.center, b.center)

    def test_frames_decouple_without_player_and_smooth_terms(self):
        # with the shared center frozen and only per-frame field residuals,
        # a frame's result cannot depend on any other frame's observations
        rng = np.random.default_rng(3)
        truth = make_truth(3, f0=2500, f1=3500, x0=-10, x1=20)
        obs = exact_observations(truth, None, n_field=12)
        init = perturbed_init(truth, rng, rot_deg=0.5, f_rel=0.03)
        sub_init = BroadcastSequence(
            clip=init.clip, center=init.center.copy(), focal=init.focal[:1],
            principal=init.principal[:1].copy(), dist=init.dist[:1].copy(),
            rotation_quat_wxyz=init.rotation_quat_wxyz[:1].copy(),
            image_size=init.image_size)
        weights = BroadcastWeights(player_weight=0.0)
        cfg = SolveConfig(first_order_iterations=300)
        full, _ = calibrate_clip(init, obs, None, TEMPLATE, weights,
                                 config=cfg, freeze_center=True)
        single, _ = calibrate_clip(sub_init, {0: obs[0]}, None, TEMPLATE,
                                   weights, config=cfg, freeze_center=True)
        assert np.array_equal(full.focal[:1], single.focal)
        assert np.array_equal(full.rotation_quat_wxyz[:1],
                              single.rotation_quat_wxyz)
        assert np.array_equal(full.principal[:1], single.principal)

    def test_world_rotation_leaves_residuals_identical(self):
        # rotating + translating the world and all inputs consistently must
        # not change a single reprojection residual
        rng = np.random.default_rng(13)
        truth = make_truth(2, f0=3000, f1=3400, x0=0, x1=10)
        tracks = walking_tracks(2, 4, rng)
        obs_named = exact_observations(truth, tracks, n_field=10)
        # rewrite refs as explicit 3D points so they can be transformed
        obs = {}
        for t, fo in obs_named.items():
            X, px = fo.resolve_field(TEMPLATE)
            obs[t] = FrameObservations(
                frame=t, field_points=list(zip(X, px)), players=fo.players)
        init = perturbed_init(truth, rng, rot_deg=0.5, f_rel=0.03)

        ang = np.deg2rad(25.0)
        Rg = np.array([[np.cos(ang), -np.sin(ang), 0.0],
                       [np.sin(ang), np.cos(ang), 0.0],
                       [0.0, 0.0, 1.0]])
        tg = np.array([3.0, -2.0, 0.4])

        obs_rot = {}
        for t, fo in obs.items():
            moved = [(Rg @ X + tg, px) for X, px in fo.field_points]
            obs_rot[t] = FrameObservations(frame=t, field_points=moved,
                                           players=fo.players)
        tracks_rot = {t: [kp @ Rg.T + tg for kp in skels]
                      for t, skels in tracks.items()}
        quats_rot = [matrix_to_quat(quat_to_matrix(q) @ Rg.T)
                     for q in init.rotation_quat_wxyz]
        init_rot = BroadcastSequence(
            clip=init.clip, center=Rg @ init.center + tg,
            focal=init.focal.copy(), principal=init.principal.copy(),
            dist=init.dist.copy(), rotation_quat_wxyz=np.stack(quats_rot),
            image_size=init.image_size)

        cfg = SolveConfig(first_order_iterations=0)
        _, rep_a = calibrate_clip(init, obs, tracks, None, config=cfg)
        _, rep_b = calibrate_clip(init_rot, obs_rot, tracks_rot, None,
                                  config=cfg)
        assert rep_b.initial_cost == pytest.approx(rep_a.initial_cost,
                                                   rel=1e-9)

    def test_missing_init(self):
        truth = make_truth(2)
        obs = exact_observations(truth, None, n_field=5)
        with pytest.raises(MissingInit):
            calibrate_clip(None, obs, None, TEMPLATE)
        short = BroadcastSequence(
            clip="x", center=CENTER, focal=truth.focal[:1],
            principal=truth.principal[:1], dist=truth.dist[:1],
            rotation_quat_wxyz=truth.rotation_quat_wxyz[:1],
            image_size=(W, H))
        with pytest.raises(MissingInit, match="frame 1"):
            calibrate_clip(short, obs, None, TEMPLATE)

    def test_no_observations_rejected(self):
        truth = make_truth(2)
        with pytest.raises(ValueError, match="no usable observations"):
            calibrate_clip(truth, {}, None, TEMPLATE)

    def test_out_of_bounds_observation_rejected(self):
        truth = make_truth(1)
        fo = FrameObservations(frame=0,
                               field_points=[("x", (-500.0, 100.0))])
        with pytest.raises(ValueError, match="outside"):
            calibrate_clip(truth, {0: fo}, None, TEMPLATE)

    def test_divergence_detected(self):
        rng = np.random.default_rng(1)
        truth = make_truth(2, f0=3000, f1=3200, x0=0, x1=5)
        obs = exact_observations(truth, None, n_field=10)
        init = perturbed_init(truth, rng, rot_deg=0.5, f_rel=0.02)
        with pytest.raises(DivergenceDetected):
            calibrate_clip(init, obs, None, TEMPLATE,
                           config=SolveConfig(first_order_iterations=300,
                                              learning_rate=-0.01))

    def test_accepts_observation_list_and_track_objects(self):
        truth = make_truth(2, f0=2800, f1=3200, x0=0, x1=8)
        rng = np.random.default_rng(21)
        raw = walking_tracks(2, 2, rng)
        tracks = []
        for p in range(2):
            tr = Track(id=p)
            for t in range(2):
                joints = raw[t][p]
                tr.add(SkeletonPose(frame=t, joints=joints,
                                    valid=np.ones(len(joints), dtype=bool)))
            tracks.append(tr)
        obs = exact_observations(truth, raw, n_field=8)
        out, report = calibrate_clip(
            truth, list(obs.values()), tracks, TEMPLATE,
            config=SolveConfig(first_order_iterations=50))
        assert report.final_cost <= report.initial_cost + 1e-9
        assert out.n_frames == 2


# ---------------------------------------------------------------------------
# overlay
# ---------------------------------------------------------------------------

class TestReprojectOverlay:
    def test_ground_truth_overlay_matches_projection(self):
        seq = make_truth(3)
        cam = seq.camera(0)
        overlay = reproject_overlay(seq, TEMPLATE, None, 0)
        checked = 0
        for pid, pts in TEMPLATE.polylines:
            dense = _densify(pts, 0.5)
            px, valid = cam.project_masked(dense)
            if not (np.all(valid) and np.all(cam.in_image(px))):
                continue
            runs = [pl for pl in overlay["polylines"] if pl["id"] == pid]
            assert len(runs) == 1
            np.testing.assert_allclose(runs[0]["points"], px, atol=1e-6)
            checked += 1
        assert checked >= 1

    def test_out_of_view_markings_absent(self):
        # tight zoom on the right penalty area: the center circle is gone
        seq = make_truth(1, f0=6000, f1=6000, x0=40, x1=40)
        overlay = reproject_overlay(seq, TEMPLATE, None, 0)
        ids = {pl["id"].split("#")[0] for pl in overlay["polylines"]}
        assert ids  # something is visible
        assert "center_circle" not in ids

    def test_clipping_stays_inside_image(self):
        seq = make_truth(3)
        overlay = reproject_overlay(seq, TEMPLATE, None, 1)
        pts = np.concatenate([pl["points"] for pl in overlay["polylines"]])
        assert pts[:, 0].min() >= -1e-9 and pts[:, 0].max() <= W - 1 + 1e-9
        assert pts[:, 1].min() >= -1e-9 and pts[:, 1].max() <= H - 1 + 1e-9

    def test_skeletons_projected_with_validity(self):
        seq = make_truth(3)
        tracks = {0: [STAND + [0.0, 0.0, 0.0]]}
        overlay = reproject_overlay(seq, TEMPLATE, tracks, 0)
        assert len(overlay["skeletons"]) == 1
        sk = overlay["skeletons"][0]
        assert sk["valid"].all()
        assert np.isfinite(sk["joints"]).all()
        assert overlay["bones"] == [list(b) for b in COCO_TREE]

    def test_behind_camera_points_masked(self):
        seq = make_truth(1)
        behind = STAND + [0.0, -80.0, 0.0]  # behind the mount at y=-45
        overlay = reproject_overlay(seq, None, {0: [behind]}, 0)
        sk = overlay["skeletons"][0]
        assert not sk["valid"].any()
        assert np.isnan(sk["joints"]).all()

    def test_frame_out_of_range(self):
        seq = make_truth(2)
        with pytest.raises(FrameOutOfRange):
            reproject_overlay(seq, TEMPLATE, None, 2)
