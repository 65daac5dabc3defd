"""Published file formats: schemas, validation, atomic writes.

Every JSON artifact the package reads or writes has a schema here, keyed
by kind.  Files carry an explicit ``"v": 1`` version field; per-frame
streams are JSON-lines whose rows validate against the row schema.
Writers go through an atomic temp-file + rename so a crash never leaves
a half-written artifact, and writes are canonical (sorted keys, fixed
indentation) so reruns of a deterministic pipeline are byte-identical.
"""

import io
import json
import os
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

__all__ = [
    "FormatError",
    "SCHEMAS",
    "canonical_dumps",
    "nan_to_none",
    "read_json",
    "read_jsonl",
    "read_pgm",
    "validate_payload",
    "write_json",
    "write_jsonl",
    "write_pgm",
    "write_png",
    "write_scene_dir",
]


class FormatError(ValueError):
    """A payload does not match its published schema."""


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

def _vec(n, item=None):
    return {"type": "array", "items": item or {"type": "number"},
            "minItems": n, "maxItems": n}


def _arr(item, min_items=0):
    return {"type": "array", "items": item, "minItems": min_items}


def _obj(properties, required=None, extra=False):
    return {"type": "object", "properties": properties,
            "required": sorted(required if required is not None
                               else properties),
            "additionalProperties": extra}


_V1 = {"const": 1}
_STR = {"type": "string"}
_NUM = {"type": "number"}
_INT = {"type": "integer"}
_FRAME = {"type": "integer", "minimum": 0}
_NUM_OR_NULL = {"type": ["number", "null"]}

_CAMERA = _obj({
    "name": _STR,
    "image_size": _vec(2, _INT),
    "focal": _vec(2),
    "principal": _vec(2),
    "dist": _vec(3),
    "rotation_quat_wxyz": _vec(4),
    "translation": _vec(3),
})

_POSE = _obj({
    "joints": _arr(_vec(3), 1),
    "valid": _arr({"type": "boolean"}, 1),
})

_DETECTION = _obj({
    "frame": _FRAME,
    "camera": _STR,
    "joints": _arr(_vec(3), 1),
    "subject_hint": _INT,
    "bbox": _vec(4),
}, required=["frame", "camera", "joints"])

_REF = {"oneOf": [_STR, _vec(3)]}
_PIXEL_ENTRY = _obj({"ref": _REF, "px": _vec(2)})

_BODY_FRAME = _obj({
    "theta_r": _vec(3),
    "theta_b": _arr(_NUM, 3),
    "t": _vec(3),
})

SCHEMAS = {
    "camera": _CAMERA,
    "cameras": _obj({"v": _V1, "cameras": _arr(_CAMERA)}),
    "template": _obj({
        "v": _V1,
        "extent": _vec(2),
        "landmarks": _arr(_obj({"id": _STR, "xyz": _vec(3)})),
        "polylines": _arr(_obj({"id": _STR, "points": _arr(_vec(3), 2)})),
    }),
    "correspondences": _obj({
        "v": _V1,
        "camera": _STR,
        "pairs": _arr(_obj({"landmark_id": _STR, "px": _vec(2)})),
    }),
    "detection": _DETECTION,
    "tracks": _obj({
        "v": _V1,
        "tracks": _arr(_obj({
            "id": _INT,
            "frames": {"type": "object",
                       "patternProperties": {r"^[0-9]+$": _POSE},
                       "additionalProperties": False},
        })),
    }),
    "body_model": _obj({
        "v": _V1,
        "parents": _arr(_INT, 1),
        "template": _arr(_vec(3), 1),
        "blend": _arr(_arr(_vec(3), 1), 1),
        "regressor": _obj({"rows": _INT, "entries": _arr(_vec(3))}),
        "bones": _arr(_vec(2, _INT), 1),
        "vertex_template": _arr(_vec(3)),
        "vertex_regressor": _arr(_arr(_NUM)),
    }, required=["v", "parents", "template", "blend", "regressor", "bones"]),
    "body_params": _obj({
        "v": _V1,
        "tracks": _arr(_obj({
            "id": _INT,
            "beta": _arr(_NUM, 1),
            "frames": {"type": "object",
                       "patternProperties": {r"^[0-9]+$": _BODY_FRAME},
                       "additionalProperties": False},
        })),
    }),
    "broadcast": _obj({
        "v": _V1,
        "clip": _STR,
        "image_size": _vec(2, _INT),
        "C": _vec(3),
        "frames": _arr(_obj({
            "f": {"type": "number", "exclusiveMinimum": 0},
            "principal": _vec(2),
            "k": _vec(3),
            "rotation_quat_wxyz": _vec(4),
        }), 1),
    }),
    "observation": _obj({
        "frame": _FRAME,
        "field": _arr(_PIXEL_ENTRY),
        "players": _arr(_DETECTION),
        "flow": _arr(_PIXEL_ENTRY),
    }, required=["frame"]),
    "report": _obj({
        "v": _V1,
        "g_mpjpe_mm": _NUM_OR_NULL,
        "pa_mpjpe_mm": _NUM_OR_NULL,
        "drift_cm_per_m": _NUM_OR_NULL,
        "matched_frames": _FRAME,
        "joint_subset": _arr(_INT),
        "alignment": {"type": "object"},
        "per_track": {"type": "object"},
    }),
    "scene_config": _obj({
        "v": _V1,
        "seed": _INT,
        "n_frames": {"type": "integer", "minimum": 1},
        "fps": {"type": "number", "exclusiveMinimum": 0},
        "n_subjects": {"type": "integer", "minimum": 1},
        "officials": {"type": "integer", "minimum": 0},
        "rig": _obj({
            "n_cameras": _INT,
            "height_range": _vec(2),
            "standoff_range": _vec(2),
            "focal_range": _vec(2),
            "look_policy": {"enum": ["spread", "corner"]},
            "image_size": _vec(2, _INT),
        }),
        "motion": _obj({
            "base_speed": _NUM, "speed_amplitude": _NUM,
            "speed_period_s": _NUM, "min_speed": _NUM, "max_speed": _NUM,
            "turn_rate": _NUM, "waypoint_margin": _NUM, "stride_m": _NUM,
            "gait_amplitude": _NUM,
        }),
        "noise": _obj({
            "keypoint_sigma_px": _NUM, "dropout": _NUM, "outlier_rate": _NUM,
            "pick_sigma_px": _NUM, "camera_rot_deg": _NUM,
            "camera_trans_m": _NUM, "broadcast_rot_deg": _NUM,
            "broadcast_focal_rel": _NUM,
        }),
        "broadcast": {"type": "boolean"},
        "broadcast_focal": _vec(2),
        "n_picks": {"type": "integer", "minimum": 4},
        "n_broadcast_field": {"type": "integer", "minimum": 1},
    }),
    "run": _obj({
        "v": _V1,
        "run_id": _STR,
        "created": _STR,
        "config": {"type": "object"},
        "inputs": {"type": "object",
                   "additionalProperties": {"type": "string"}},
        "stages": _arr(_obj({
            "name": _STR,
            "status": {"enum": ["ok", "failed"]},
            "seconds": _NUM,
            "error": _STR,
        }, required=["name", "status", "seconds"])),
        "outputs": _arr(_STR),
    }),
}

_VALIDATORS = {kind: jsonschema.Draft202012Validator(schema)
               for kind, schema in SCHEMAS.items()}


def validate_payload(kind, payload):
    """Check a payload against its published schema; raise FormatError."""
    try:
        validator = _VALIDATORS[kind]
    except KeyError:
        raise FormatError(f"unknown format kind {kind!r}") from None
    error = jsonschema.exceptions.best_match(validator.iter_errors(payload))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "(root)"
        raise FormatError(f"{kind}: {error.message} at {where}")


# ---------------------------------------------------------------------------
# atomic canonical writes
# ---------------------------------------------------------------------------

def canonical_dumps(payload):
    """Canonical JSON text: sorted keys, 1-space indent, strict numbers."""
    return json.dumps(payload, sort_keys=True, indent=1,
                      allow_nan=False) + "\n"


def nan_to_none(obj):
    """Replace non-finite floats with null so strict JSON can carry them."""
    if isinstance(obj, dict):
        return {k: nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [nan_to_none(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _atomic_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(data)
            fp.flush()
            os.fsync(fp.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload, kind=None):
    if kind is not None:
        validate_payload(kind, payload)
    text = canonical_dumps(payload)   # serialize before touching the disk
    _atomic_bytes(path, text.encode("utf-8"))


def read_json(path, kind=None):
    with open(path, encoding="utf-8") as fp:
        payload = json.load(fp)
    if kind is not None:
        validate_payload(kind, payload)
    return payload


def write_jsonl(path, rows, kind=None):
    lines = []
    for row in rows:
        if kind is not None:
            validate_payload(kind, row)
        lines.append(json.dumps(row, sort_keys=True, allow_nan=False))
    _atomic_bytes(path, ("\n".join(lines) + "\n" if lines else "")
                  .encode("utf-8"))


def read_jsonl(path, kind=None):
    rows = []
    with open(path, encoding="utf-8") as fp:
        for n, line in enumerate(fp, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if kind is not None:
                try:
                    validate_payload(kind, row)
                except FormatError as e:
                    raise FormatError(f"{path} line {n}: {e}") from None
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    """Binary PGM (P5, maxval 255) for edge maps and previews."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("PGM wants a 2D uint8 array")
    h, w = arr.shape
    _atomic_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fp:
        data = fp.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":           # comment to end of line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1                                    # single whitespace after maxval
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def write_png(path, image):
    from PIL import Image

    arr = np.asarray(image)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    _atomic_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# scene directory: everything downstream modules consume
# ---------------------------------------------------------------------------

def write_scene_dir(out_dir, bundle, observations):
    """Write one rendered scene as the files the pipeline stages read.

    Returns the relative paths written, sorted.
    """
    from .body import body_params_to_dict
    from .mocap import tracks_to_dict

    out = Path(out_dir)
    written = []

    def emit(rel, payload, kind):
        write_json(out / rel, payload, kind=kind)
        written.append(rel)

    emit("scene.json", bundle.config.to_dict(), "scene_config")
    emit("template.json", bundle.template.to_dict(), "template")
    emit("cameras_gt.json",
         {"v": 1, "cameras": [c.to_dict() for c in bundle.cameras]},
         "cameras")
    emit("cameras_init.json",
         {"v": 1, "cameras": [c.to_dict()
                              for c in observations.cameras_init]},
         "cameras")
    emit("tracks_gt.json", tracks_to_dict(bundle.tracks), "tracks")
    emit("bodies_gt.json", body_params_to_dict(
        {b.subject: dict(enumerate(b.params)) for b in bundle.bodies}),
        "body_params")

    for name in sorted(observations.detections):
        rel = f"detections/{name}.jsonl"
        write_jsonl(out / rel,
                    [d.to_dict() for d in observations.detections[name]],
                    kind="detection")
        written.append(rel)
    for name in sorted(observations.edge_maps):
        rel = f"edges/{name}.pgm"
        write_pgm(out / rel, observations.edge_maps[name])
        written.append(rel)
    for name in sorted(observations.picks):
        emit(f"picks/{name}.json", observations.picks[name].to_dict(),
             "correspondences")

    if bundle.broadcast is not None:
        emit("broadcast_gt.json", bundle.broadcast.to_dict(), "broadcast")
        emit("broadcast_init.json", observations.broadcast_init.to_dict(),
             "broadcast")
        rel = "broadcast_obs.jsonl"
        write_jsonl(out / rel,
                    [observations.broadcast_observations[t].to_dict()
                     for t in sorted(observations.broadcast_observations)],
                    kind="observation")
        written.append(rel)
    return sorted(written)
