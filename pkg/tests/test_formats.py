"""Tests for published file formats: schemas, atomic writes, images."""

import json

import numpy as np
import pytest
from PIL import Image

from pitchcap import formats
from pitchcap.formats import (
    FormatError,
    canonical_dumps,
    nan_to_none,
    read_json,
    read_jsonl,
    read_pgm,
    validate_payload,
    write_json,
    write_jsonl,
    write_pgm,
    write_png,
    write_scene_dir,
)
from pitchcap.synth import NoiseSpec, SceneConfig, generate_scene, \
    render_observations

SCENE_FILE_KINDS = {
    "scene.json": "scene_config",
    "template.json": "template",
    "cameras_gt.json": "cameras",
    "cameras_init.json": "cameras",
    "tracks_gt.json": "tracks",
    "bodies_gt.json": "body_params",
    "broadcast_gt.json": "broadcast",
    "broadcast_init.json": "broadcast",
}


def kind_for(rel):
    if rel.startswith("detections/"):
        return "detection"
    if rel == "broadcast_obs.jsonl":
        return "observation"
    if rel.startswith("picks/"):
        return "correspondences"
    if rel.endswith(".pgm"):
        return None
    return SCENE_FILE_KINDS[rel]


@pytest.fixture(scope="module")
def scene():
    cfg = SceneConfig(seed=3, n_frames=10, n_subjects=4,
                      noise=NoiseSpec(keypoint_sigma_px=1.0, dropout=0.1,
                                      camera_rot_deg=0.3, camera_trans_m=0.2,
                                      broadcast_rot_deg=1.0,
                                      broadcast_focal_rel=0.05))
    bundle = generate_scene(cfg)
    return bundle, render_observations(bundle)


class TestSceneDir:

    def test_every_emitted_file_validates(self, scene, tmp_path):
        bundle, obs = scene
        written = write_scene_dir(tmp_path, bundle, obs)
        assert "scene.json" in written and "tracks_gt.json" in written
        assert any(r.startswith("detections/") for r in written)
        assert any(r.endswith(".pgm") for r in written)
        for rel in written:
            kind = kind_for(rel)
            if rel.endswith(".pgm"):
                assert read_pgm(tmp_path / rel).shape == (1080, 1920)
            elif rel.endswith(".jsonl"):
                assert read_jsonl(tmp_path / rel, kind=kind)
            else:
                read_json(tmp_path / rel, kind=kind)
        assert not list(tmp_path.rglob("*.tmp"))

    def test_rewrite_is_byte_identical(self, scene, tmp_path):
        bundle, obs = scene
        written = write_scene_dir(tmp_path, bundle, obs)
        first = {rel: (tmp_path / rel).read_bytes() for rel in written}
        assert write_scene_dir(tmp_path, bundle, obs) == written
        for rel in written:
            assert (tmp_path / rel).read_bytes() == first[rel]

    def test_round_trips(self, scene, tmp_path):
        bundle, obs = scene
        write_scene_dir(tmp_path, bundle, obs)
        assert SceneConfig.from_dict(
            read_json(tmp_path / "scene.json")) == bundle.config
        em = read_pgm(tmp_path / "edges/cam00.pgm")
        assert np.array_equal(em, obs.edge_maps["cam00"])
        rows = read_jsonl(tmp_path / "detections/cam00.jsonl")
        assert rows[0]["camera"] == "cam00"


class TestAtomicity:

    def test_failed_validation_leaves_file_untouched(self, tmp_path):
        path = tmp_path / "cams.json"
        good = {"v": 1, "cameras": []}
        write_json(path, good, kind="cameras")
        before = path.read_bytes()
        with pytest.raises(FormatError):
            write_json(path, {"v": 2, "cameras": []}, kind="cameras")
        assert path.read_bytes() == before

    def test_unserializable_payload_leaves_file_untouched(self, tmp_path):
        path = tmp_path / "x.json"
        write_json(path, {"a": 1})
        before = path.read_bytes()
        with pytest.raises(TypeError):
            write_json(path, {"a": object()})
        assert path.read_bytes() == before
        assert not list(tmp_path.glob("*.tmp"))

    def test_nan_is_rejected_not_emitted(self, tmp_path):
        with pytest.raises(ValueError):
            write_json(tmp_path / "r.json", {"x": float("nan")})
        assert nan_to_none({"x": float("nan"), "y": [1.0, float("inf")],
                            "z": 2.0}) == {"x": None, "y": [1.0, None],
                                           "z": 2.0}

    def test_creates_parent_directories(self, tmp_path):
        write_json(tmp_path / "a/b/c.json", {"k": 1})
        assert read_json(tmp_path / "a/b/c.json") == {"k": 1}


class TestSchemas:

    def test_unknown_kind(self):
        with pytest.raises(FormatError, match="unknown format kind"):
            validate_payload("telemetry", {})

    def test_wrong_version(self):
        with pytest.raises(FormatError, match="tracks"):
            validate_payload("tracks", {"v": 2, "tracks": []})

    def test_missing_field_named_in_error(self):
        cam = {"name": "c", "image_size": [8, 8], "focal": [1.0, 1.0],
               "principal": [0.0, 0.0], "dist": [0.0, 0.0, 0.0],
               "rotation_quat_wxyz": [1.0, 0.0, 0.0, 0.0]}
        with pytest.raises(FormatError, match="translation"):
            validate_payload("camera", cam)

    def test_extra_keys_rejected(self):
        cam = {"name": "c", "image_size": [8, 8], "focal": [1.0, 1.0],
               "principal": [0.0, 0.0], "dist": [0.0, 0.0, 0.0],
               "rotation_quat_wxyz": [1.0, 0.0, 0.0, 0.0],
               "translation": [0.0, 0.0, 0.0], "exposure": 1}
        with pytest.raises(FormatError, match="exposure"):
            validate_payload("camera", cam)

    def test_detection_rows(self):
        row = {"frame": 0, "camera": "cam00",
               "joints": [[1.0, 2.0, 1.0]], "subject_hint": 3}
        validate_payload("detection", row)
        with pytest.raises(FormatError):
            validate_payload("detection", {**row, "frame": -1})
        with pytest.raises(FormatError):
            validate_payload("detection",
                             {**row, "joints": [[1.0, 2.0]]})

    def test_observation_rows(self):
        validate_payload("observation", {"frame": 4})
        validate_payload("observation", {
            "frame": 4,
            "field": [{"ref": "center_mark", "px": [1.0, 2.0]},
                      {"ref": [0.0, 9.15, 0.0], "px": [3.0, 4.0]}]})
        with pytest.raises(FormatError):
            validate_payload("observation", {
                "frame": 4, "field": [{"ref": 7, "px": [1.0, 2.0]}]})

    def test_broadcast_positive_focal(self):
        seq = {"v": 1, "clip": "x", "image_size": [8, 8], "C": [0., 0., 1.],
               "frames": [{"f": 0.0, "principal": [0., 0.], "k": [0., 0., 0.],
                           "rotation_quat_wxyz": [1., 0., 0., 0.]}]}
        with pytest.raises(FormatError, match="broadcast"):
            validate_payload("broadcast", seq)

    def test_tracks_frame_keys_are_digits(self):
        pose = {"joints": [[0.0, 0.0, 0.0]], "valid": [True]}
        validate_payload("tracks", {"v": 1, "tracks": [
            {"id": 0, "frames": {"12": pose}}]})
        with pytest.raises(FormatError):
            validate_payload("tracks", {"v": 1, "tracks": [
                {"id": 0, "frames": {"t12": pose}}]})

    def test_run_status_enum(self):
        run = {"v": 1, "run_id": "r", "created": "2024-01-01T00:00:00",
               "config": {}, "inputs": {}, "outputs": [],
               "stages": [{"name": "calib.static", "status": "ok",
                           "seconds": 0.1}]}
        validate_payload("run", run)
        run["stages"][0]["status"] = "skipped"
        with pytest.raises(FormatError):
            validate_payload("run", run)


class TestCanonicalJson:

    def test_key_order_invariance(self):
        a = canonical_dumps({"b": 1, "a": [1, 2], "c": {"y": 0, "x": 1}})
        b = canonical_dumps({"c": {"x": 1, "y": 0}, "a": [1, 2], "b": 1})
        assert a == b
        assert a.endswith("\n")

    def test_jsonl_blank_lines_and_error_location(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"frame": 0}\n\n{"frame": -2}\n')
        assert read_jsonl(path) == [{"frame": 0}, {"frame": -2}]
        with pytest.raises(FormatError, match="line 3"):
            read_jsonl(path, kind="observation")

    def test_write_jsonl_round_trip(self, tmp_path):
        rows = [{"frame": i, "field": []} for i in range(3)]
        write_jsonl(tmp_path / "o.jsonl", rows, kind="observation")
        assert read_jsonl(tmp_path / "o.jsonl", "observation") == rows
        write_jsonl(tmp_path / "empty.jsonl", [])
        assert (tmp_path / "empty.jsonl").read_bytes() == b""
        assert read_jsonl(tmp_path / "empty.jsonl") == []


class TestImages:

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (37, 53), dtype=np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_pgm_header_comments(self, tmp_path):
        img = np.arange(6, dtype=np.uint8).reshape(2, 3)
        raw = b"P5\n# made by hand\n3 2\n255\n" + img.tobytes()
        (tmp_path / "c.pgm").write_bytes(raw)
        assert np.array_equal(read_pgm(tmp_path / "c.pgm"), img)

    def test_pgm_rejects_other_formats(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
        with pytest.raises(ValueError, match="8-bit binary"):
            read_pgm(tmp_path / "a.pgm")
        with pytest.raises(ValueError, match="uint8"):
            write_pgm(tmp_path / "b.pgm", np.zeros((2, 2)))

    def test_pgm_is_readable_by_pillow(self, tmp_path):
        img = np.arange(35, dtype=np.uint8).reshape(5, 7)
        write_pgm(tmp_path / "x.pgm", img)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "x.pgm")),
                              img)

    def test_png_write(self, tmp_path):
        rng = np.random.default_rng(1)
        gray = rng.integers(0, 256, (16, 24), dtype=np.uint8)
        write_png(tmp_path / "g.png", gray)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "g.png")),
                              gray)
        rgb = rng.integers(0, 256, (16, 24, 3), dtype=np.uint8)
        write_png(tmp_path / "c.png", rgb)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "c.png")),
                              rgb)
