"""Tests for the synthetic scene generator.

The generator is the ground truth behind every end-to-end test, so these
tests lean on closed-form oracles: commanded speeds integrate to travelled
distance, zero-noise projections must match the cameras exactly, and the
perturbation helpers promise exact error magnitudes.  Statistical checks
(dropout rate, cross-camera independence) run on frozen seeds with wide
acceptance bands so they cannot flake.
"""

import json

import numpy as np
import pytest
import scipy.stats

from pitchcap.body import default_body_model, forward
from pitchcap.field import (
    PITCH_LENGTH,
    PITCH_WIDTH,
    build_distance_field,
    crown_height,
    default_template,
    sample_markings,
)
from pitchcap.geometry import quat_to_matrix, rotation_geodesic_deg
from pitchcap.mocap import tracks_to_dict
from pitchcap.skeleton import LEFT_HIP, RIGHT_HIP
from pitchcap.synth import (
    MotionSpec,
    NoiseSpec,
    RigSpec,
    SceneConfig,
    generate_scene,
    perturb_broadcast,
    perturb_cameras,
    render_observations,
)


def small_config(**kw):
    kw.setdefault("seed", 3)
    kw.setdefault("n_frames", 40)
    kw.setdefault("n_subjects", 8)
    return SceneConfig(**kw)


def scene_digest(bundle, obs):
    """Canonical JSON of everything a scene produces, for byte comparison."""
    payload = {
        "config": bundle.config.to_dict(),
        "tracks": tracks_to_dict(bundle.tracks),
        "cameras": [c.to_dict() for c in bundle.cameras],
        "betas": [b.beta.tolist() for b in bundle.bodies],
        "roots": [[p.t.tolist() for p in b.params] for b in bundle.bodies],
        "broadcast": bundle.broadcast.to_dict() if bundle.broadcast else None,
        "detections": {
            name: [[d.frame, d.subject_hint, d.joints.tolist()] for d in dets]
            for name, dets in obs.detections.items()},
        "edges": {name: em.tobytes().hex()[:200]
                  for name, em in obs.edge_maps.items()},
        "picks": {name: [[i, p.tolist()] for i, p in cs.pairs]
                  for name, cs in obs.picks.items()},
        "bc_obs": {
            t: {"field": [[i, p.tolist()] for i, p in fo.field_points],
                "players": [[d.subject_hint, d.joints.tolist()]
                            for d in fo.players]}
            for t, fo in (obs.broadcast_observations or {}).items()},
        "init_f": obs.broadcast_init.focal.tolist()
                  if obs.broadcast_init else None,
        "init_cams": [c.to_dict() for c in obs.cameras_init],
    }
    return json.dumps(payload, sort_keys=True)


class TestSceneConfig:

    def test_dict_round_trip(self):
        cfg = SceneConfig(seed=9, n_frames=120, n_subjects=14, officials=2,
                          rig=RigSpec(n_cameras=12, look_policy="corner"),
                          noise=NoiseSpec(keypoint_sigma_px=2.0, dropout=0.1),
                          broadcast_focal=(1800.0, 5200.0))
        d = cfg.to_dict()
        assert d["v"] == 1
        # through JSON: tuples become lists and must come back as tuples
        back = SceneConfig.from_dict(json.loads(json.dumps(d)))
        assert back == cfg

    def test_validate_camera_count(self):
        for n in (9, 19):
            with pytest.raises(ValueError, match="10..18"):
                small_config(rig=RigSpec(n_cameras=n)).validate()
        small_config(rig=RigSpec(n_cameras=10)).validate()
        small_config(rig=RigSpec(n_cameras=18)).validate()

    def test_validate_look_policy(self):
        with pytest.raises(ValueError, match="look policy"):
            small_config(rig=RigSpec(look_policy="birds_eye")).validate()

    def test_validate_speed_cap(self):
        with pytest.raises(ValueError, match="9 m/s"):
            small_config(motion=MotionSpec(max_speed=9.5)).validate()

    def test_validate_turning_radius(self):
        # radius = max_speed / turn_rate must fit inside the waypoint margin
        with pytest.raises(ValueError, match="turning radius"):
            small_config(motion=MotionSpec(turn_rate=2.0)).validate()
        small_config(motion=MotionSpec(turn_rate=2.3)).validate()

    def test_validate_basics(self):
        with pytest.raises(ValueError):
            small_config(n_frames=0).validate()
        with pytest.raises(ValueError):
            small_config(n_subjects=0).validate()


class TestGenerateScene:

    def test_byte_identical_repeats(self):
        cfg = small_config(noise=NoiseSpec(keypoint_sigma_px=2.0, dropout=0.2,
                                           outlier_rate=0.02,
                                           pick_sigma_px=0.5,
                                           camera_rot_deg=0.5,
                                           camera_trans_m=0.25,
                                           broadcast_rot_deg=1.0,
                                           broadcast_focal_rel=0.05))
        digests = []
        for _ in range(2):
            bundle = generate_scene(cfg)
            digests.append(scene_digest(bundle, render_observations(bundle)))
        assert digests[0] == digests[1]

    def test_subjects_stay_on_the_pitch(self):
        bundle = generate_scene(small_config(seed=5, n_frames=500,
                                             n_subjects=12, broadcast=False))
        hx, hy = PITCH_LENGTH / 2.0, PITCH_WIDTH / 2.0
        for track in bundle.tracks:
            for pose in track.poses.values():
                mid = 0.5 * (pose.joints[LEFT_HIP] + pose.joints[RIGHT_HIP])
                assert abs(mid[0]) < hx and abs(mid[1]) < hy

    def test_speed_profile_band(self):
        cfg = small_config(seed=2, n_frames=300, officials=2, broadcast=False)
        bundle = generate_scene(cfg)
        players = [b for b in bundle.bodies if b.role == "player"]
        officials = [b for b in bundle.bodies if b.role == "official"]
        assert len(players) == 8 and len(officials) == 2

        def speeds(body):
            roots = np.array([p.t[:2] for p in body.params])
            return np.linalg.norm(np.diff(roots, axis=0), axis=1) * cfg.fps

        ps = np.concatenate([speeds(b) for b in players])
        # sinusoid 4.0 +/- 1.5 m/s; displacement integrates it exactly
        assert ps.min() > 2.45 and ps.max() < 5.55
        assert ps.max() > 5.3 and ps.min() < 2.7   # band actually explored
        for b in officials:
            assert speeds(b).mean() < 2.8

    def test_sixty_second_travel_distance(self):
        # 22 subjects for a minute should cover about 5.3 km.  The root
        # path length is the exact integral of the commanded speed; the
        # mid-hip path adds gait sway on top (~8%) and just needs to stay
        # in a plausibility band.
        cfg = SceneConfig(seed=7, n_frames=3000, n_subjects=22,
                          broadcast=False)
        bundle = generate_scene(cfg)
        root_xy = sum(
            float(np.sum(np.linalg.norm(
                np.diff([p.t[:2] for p in b.params], axis=0), axis=1)))
            for b in bundle.bodies)
        analytic = 22 * (cfg.n_frames - 1) / cfg.fps * 4.0
        assert abs(root_xy - analytic) / analytic < 1e-3

        mid_hip = 0.0
        for track in bundle.tracks:
            pts = np.array([0.5 * (track.poses[t].joints[LEFT_HIP]
                                   + track.poses[t].joints[RIGHT_HIP])
                            for t in range(cfg.n_frames)])
            mid_hip += float(np.sum(np.linalg.norm(np.diff(pts, axis=0),
                                                   axis=1)))
        assert 5300.0 * 0.9 < mid_hip < 5300.0 * 1.1

    def test_feet_ride_the_pitch_crown(self):
        bundle = generate_scene(small_config(broadcast=False))
        model = default_body_model()
        for body in bundle.bodies[:3]:
            for t in (0, 20, 39):
                joints, _ = forward(model, body.params[t])
                crown = crown_height(body.params[t].t[0], body.params[t].t[1])
                assert abs(joints[:, 2].min() - crown) < 1e-12

    def test_track_and_body_agree(self):
        # the stored keypoints are the forward model of the stored params
        bundle = generate_scene(small_config(broadcast=False))
        model = default_body_model()
        for body, track in zip(bundle.bodies, bundle.tracks):
            _, kps = forward(model, body.params[17])
            assert np.allclose(track.poses[17].joints, kps, atol=1e-12)

    def test_rig_shape(self):
        bundle = generate_scene(small_config(broadcast=False))
        assert len(bundle.cameras) == 16
        names = [c.name for c in bundle.cameras]
        assert names == sorted(names) and len(set(names)) == 16
        for cam in bundle.cameras:
            assert cam.center[2] >= 12.0 - 1e-9
            # outside the pitch proper
            assert (abs(cam.center[0]) > PITCH_LENGTH / 2.0
                    or abs(cam.center[1]) > PITCH_WIDTH / 2.0)

    def test_corner_look_policy(self):
        # most mounts stare at one corner (the setup that starves a
        # structure-only bundle adjustment); the few whose corner aim
        # frames too few landmarks fall back to wider views
        cfg = small_config(seed=11, n_frames=2, n_subjects=4, broadcast=False,
                           rig=RigSpec(look_policy="corner"))
        bundle = generate_scene(cfg)
        corner = np.array([44.0, 26.0, 0.0])
        staring = 0
        for cam in bundle.cameras:
            fwd = quat_to_matrix(cam.rotation_quat_wxyz)[2]
            d = corner - cam.center
            staring += fwd @ (d / np.linalg.norm(d)) > 0.98
        assert staring >= 12

    def test_broadcast_sweep(self):
        cfg = small_config(broadcast_focal=(2000.0, 6000.0))
        seq = generate_scene(cfg).broadcast
        assert seq.n_frames == cfg.n_frames
        assert seq.focal[0] == 2000.0 and seq.focal[-1] == 6000.0
        assert np.all(np.diff(seq.focal) > 0)
        assert seq.center[1] < -PITCH_WIDTH / 2.0 and seq.center[2] > 0
        # pans after the crowd: principal axis keeps hitting the pitch
        for t in range(0, cfg.n_frames, 10):
            cam = seq.camera(t)
            fwd = quat_to_matrix(cam.rotation_quat_wxyz)[2]
            s = -cam.center[2] / fwd[2]
            hit = cam.center + s * fwd
            assert abs(hit[0]) < PITCH_LENGTH / 2.0
            assert abs(hit[1]) < PITCH_WIDTH / 2.0


class TestRenderObservations:

    def test_zero_noise_projections_are_exact(self):
        bundle = generate_scene(small_config())
        obs = render_observations(bundle)
        cam = bundle.cameras[0]
        for det in obs.detections[cam.name][:100]:
            pose = bundle.tracks[det.subject_hint].poses[det.frame]
            px = cam.project(pose.joints)
            m = det.joints[:, 2] > 0
            assert m.sum() >= 6
            assert np.max(np.abs(px[m] - det.joints[m, :2])) < 1e-9

    def test_zero_noise_picks_are_exact(self):
        bundle = generate_scene(small_config())
        obs = render_observations(bundle)
        for cam in bundle.cameras:
            pairs = obs.picks[cam.name].pairs
            # every mount frames at least a 6-point resection's worth
            assert 6 <= len(pairs) <= bundle.config.n_picks
            for ident, px in pairs:
                gt = cam.project(bundle.template.landmark(ident)[None])
                assert np.max(np.abs(px - gt[0])) < 1e-9

    def test_pick_jitter(self):
        bundle = generate_scene(small_config())
        clean = render_observations(bundle)
        noisy = render_observations(bundle, NoiseSpec(pick_sigma_px=0.5))
        deltas = []
        for name in clean.picks:
            for (i0, p0), (i1, p1) in zip(clean.picks[name].pairs,
                                          noisy.picks[name].pairs):
                assert i0 == i1
                deltas.append(np.linalg.norm(p1 - p0))
        deltas = np.array(deltas)
        assert np.all(deltas > 0) and 0.2 < deltas.mean() < 1.2

    def test_dropout_rate(self):
        bundle = generate_scene(small_config())
        clean = render_observations(bundle)
        noisy = render_observations(bundle, NoiseSpec(dropout=0.3))
        seen_clean = {(d.frame, d.subject_hint)
                      for d in clean.detections["cam00"]}
        seen_noisy = {(d.frame, d.subject_hint)
                      for d in noisy.detections["cam00"]}
        assert seen_noisy <= seen_clean
        n, k = len(seen_clean), len(seen_noisy)
        lo, hi = scipy.stats.binom.interval(0.99, n, 0.7)
        assert lo <= k <= hi

    def test_dropout_independent_across_cameras(self):
        # conditioned on a subject-frame being visible in both cameras,
        # presence under dropout is two independent coin flips
        bundle = generate_scene(small_config())
        clean = render_observations(bundle)
        noisy = render_observations(bundle, NoiseSpec(dropout=0.3))
        vis = {name: {(d.frame, d.subject_hint)
                      for d in clean.detections[name]}
               for name in ("cam00", "cam08")}
        both = sorted(vis["cam00"] & vis["cam08"])
        assert len(both) > 150
        pres = {name: {(d.frame, d.subject_hint)
                       for d in noisy.detections[name]}
                for name in ("cam00", "cam08")}
        a = np.array([k in pres["cam00"] for k in both])
        b = np.array([k in pres["cam08"] for k in both])
        table = np.array([[np.sum(a & b), np.sum(a & ~b)],
                          [np.sum(~a & b), np.sum(~a & ~b)]])
        _, p, _, _ = scipy.stats.chi2_contingency(table)
        assert p > 1e-3

    def test_keypoint_noise_magnitude(self):
        bundle = generate_scene(small_config())
        obs = render_observations(bundle, NoiseSpec(keypoint_sigma_px=2.0))
        cam = bundle.cameras[0]
        errs = []
        for det in obs.detections[cam.name]:
            pose = bundle.tracks[det.subject_hint].poses[det.frame]
            px = cam.project(pose.joints)
            m = det.joints[:, 2] > 0
            errs.append(px[m] - det.joints[m, :2])
        errs = np.concatenate(errs)
        assert 1.8 < errs.std() < 2.2
        assert abs(errs.mean()) < 0.2

    def test_outliers(self):
        bundle = generate_scene(small_config())
        obs = render_observations(bundle, NoiseSpec(outlier_rate=0.15))
        cam = bundle.cameras[0]
        far = tot = 0
        for det in obs.detections[cam.name]:
            pose = bundle.tracks[det.subject_hint].poses[det.frame]
            px = cam.project(pose.joints)
            m = det.joints[:, 2] > 0
            d = np.linalg.norm(px[m] - det.joints[m, :2], axis=1)
            far += int(np.sum(d > 50.0))
            tot += int(m.sum())
        assert 0.05 < far / tot < 0.25

    def test_edge_maps_trace_the_markings(self):
        bundle = generate_scene(small_config(n_frames=2, n_subjects=2))
        obs = render_observations(bundle)
        cam = bundle.cameras[0]
        edges = obs.edge_maps[cam.name]
        assert edges.dtype == np.uint8
        assert set(np.unique(edges)) == {0, 255}
        assert np.count_nonzero(edges) > 1000
        df = build_distance_field(edges)
        pts = sample_markings(bundle.template, spacing=0.5)
        px, ok = cam.project_masked(pts)
        h, w = edges.shape
        inside = (ok & (px[:, 0] >= 2) & (px[:, 0] < w - 2)
                  & (px[:, 1] >= 2) & (px[:, 1] < h - 2))
        vals = np.array([df.lookup_interp(p) for p in px[inside]])
        assert len(vals) > 500
        assert vals.max() < 0.75          # on or adjacent to a painted pixel
        assert vals.mean() < 0.3

    def test_broadcast_observations(self):
        cfg = small_config()
        bundle = generate_scene(cfg)
        obs = render_observations(bundle)
        bc = obs.broadcast_observations
        assert set(bc) <= set(range(cfg.n_frames))
        assert len(bc) == cfg.n_frames    # wide sweep always sees the field
        ids, pts = bundle.template.all_points()
        by_id = {i: p for i, p in zip(ids, pts)}
        for t in (0, 20, 39):
            fo = bc[t]
            assert fo.frame == t
            assert 0 < len(fo.field_points) <= cfg.n_broadcast_field
            cam = bundle.broadcast.camera(t)
            for ident, p in fo.field_points:
                gt = cam.project(by_id[ident][None])
                assert np.max(np.abs(p - gt[0])) < 1e-9
            for det in fo.players:
                assert det.camera == "broadcast"
                assert 0 <= det.subject_hint < cfg.n_subjects
                pose = bundle.tracks[det.subject_hint].poses[t]
                px = cam.project(pose.joints)
                m = det.joints[:, 2] > 0
                assert np.max(np.abs(px[m] - det.joints[m, :2])) < 1e-9

    def test_broadcast_zoom_crops_players(self):
        # at the long end of the sweep the view is too tight for everyone
        cfg = small_config(broadcast_focal=(2000.0, 9000.0))
        bundle = generate_scene(cfg)
        obs = render_observations(bundle)
        counts = [len(fo.players)
                  for fo in obs.broadcast_observations.values()]
        assert min(counts) < cfg.n_subjects

    def test_camera_init_perturbation_magnitudes(self):
        bundle = generate_scene(small_config(
            n_frames=2, n_subjects=2, broadcast=False,
            noise=NoiseSpec(camera_rot_deg=0.5, camera_trans_m=0.25)))
        obs = render_observations(bundle)
        for truth, init in zip(bundle.cameras, obs.cameras_init):
            ang = rotation_geodesic_deg(
                quat_to_matrix(truth.rotation_quat_wxyz),
                quat_to_matrix(init.rotation_quat_wxyz))
            assert abs(ang - 0.5) < 1e-9
            assert abs(np.linalg.norm(init.center - truth.center)
                       - 0.25) < 1e-9
            assert np.array_equal(init.focal, truth.focal)
            assert np.array_equal(init.principal, truth.principal)
            assert np.array_equal(init.dist, truth.dist)

    def test_broadcast_init_perturbation_magnitudes(self):
        bundle = generate_scene(small_config(
            noise=NoiseSpec(broadcast_rot_deg=1.0, broadcast_focal_rel=0.05)))
        obs = render_observations(bundle)
        truth, init = bundle.broadcast, obs.broadcast_init
        ratios = init.focal / truth.focal
        assert np.all(np.isin(np.round(ratios, 12), [0.95, 1.05]))
        assert len(set(np.round(ratios, 12))) == 2   # both signs occur
        for t in range(truth.n_frames):
            ang = rotation_geodesic_deg(
                quat_to_matrix(truth.rotation_quat_wxyz[t]),
                quat_to_matrix(init.rotation_quat_wxyz[t]))
            assert abs(ang - 1.0) < 1e-9

    def test_perturb_helpers_with_zero_magnitude(self):
        bundle = generate_scene(small_config(n_frames=2, n_subjects=2))
        rng = np.random.default_rng(0)
        cams = perturb_cameras(bundle.cameras, rng, 0.0, 0.0)
        for a, b in zip(cams, bundle.cameras):
            assert np.allclose(a.rotation_quat_wxyz, b.rotation_quat_wxyz)
            assert np.allclose(a.center, b.center, atol=1e-12)
        seq = perturb_broadcast(bundle.broadcast, rng, 0.0, 0.0)
        assert np.array_equal(seq.focal, bundle.broadcast.focal)
