# records.py
"""JSON-lines dataset records and the binary checkpoint format.

Every record carries `schema_version`; readers reject other versions with an
explicit regenerate message. NaN is written as the JSON token NaN so poisoned
expert outputs survive a round trip to curation.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from body_model import PARTS, BodyParams, FaceParams, FullBodyParams, HandParams
from curation import CuratedSample
from errors import ConfigurationError, DataIOError, SchemaValidationError, SchemaVersionError
from geometry import Camera
from learn import ModelSpec, ModelState
from synth import DatasetEntry, KeypointObservation, PartPrediction, Scene

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"FRPE"
CHECKPOINT_VERSION = 1


# ============ RECORD SCHEMAS ============
class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    subject_id: str


class PartParamsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pose: Optional[list[list[float]]] = None
    shape: Optional[list[float]] = None
    jaw_pose: Optional[list[float]] = None
    other_poses: Optional[list[list[float]]] = None
    expression: Optional[list[float]] = None
    side: Optional[str] = None


class FullParamsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    body: PartParamsRecord
    face: PartParamsRecord
    left_hand: PartParamsRecord
    right_hand: PartParamsRecord
    root_translation: list[float]


class ObservationFields(BaseModel):
    model_config = ConfigDict(extra="forbid")

    positions: list[list[float]]
    confidence: list[float]
    parts: list[Literal["body", "hand", "face"]]


class SceneRecord(_Record):
    type: Literal["scene"]
    seed: int
    camera: Camera
    truth: FullParamsRecord


class ObservationRecord(_Record, ObservationFields):
    type: Literal["observation"]


class PredictionRecord(_Record):
    type: Literal["prediction"]
    part: Literal["body", "face", "left_hand", "right_hand"]
    params: PartParamsRecord
    feature: list[float]
    valid: bool
    translation: Optional[list[float]] = None


class CuratedRecord(_Record):
    type: Literal["curated"]
    seed: int
    camera: Camera
    truth: FullParamsRecord
    pseudo: FullParamsRecord
    features: dict[str, list[float]]
    observation: ObservationFields
    provenance: dict


RECORD_TYPES = {
    "scene": SceneRecord,
    "observation": ObservationRecord,
    "prediction": PredictionRecord,
    "curated": CuratedRecord,
}


# ============ ENCODING ============
def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def encode_part(p):
    if isinstance(p, BodyParams):
        return {"pose": _arr(p.pose), "shape": _arr(p.shape)}
    if isinstance(p, FaceParams):
        return {"jaw_pose": _arr(p.jaw_pose), "other_poses": _arr(p.other_poses), "expression": _arr(p.expression)}
    return {"pose": _arr(p.pose), "shape": _arr(p.shape), "side": p.side}


def encode_params(params: FullBodyParams):
    return {
        "body": encode_part(params.body),
        "face": encode_part(params.face),
        "left_hand": encode_part(params.left_hand),
        "right_hand": encode_part(params.right_hand),
        "root_translation": _arr(params.root_translation),
    }


def _two_d(rows, width=3):
    a = np.asarray(rows, dtype=float)
    return a.reshape(-1, width) if a.size == 0 else a


def decode_part(rec: PartParamsRecord, part):
    if part == "body":
        return BodyParams(_two_d(rec.pose), np.asarray(rec.shape, dtype=float))
    if part == "face":
        return FaceParams(np.asarray(rec.jaw_pose, dtype=float), _two_d(rec.other_poses),
                          np.asarray(rec.expression, dtype=float))
    side = "left" if part == "left_hand" else "right"
    return HandParams(_two_d(rec.pose), np.asarray(rec.shape, dtype=float), side)


def decode_params(rec: FullParamsRecord):
    return FullBodyParams(
        body=decode_part(rec.body, "body"),
        face=decode_part(rec.face, "face"),
        left_hand=decode_part(rec.left_hand, "left_hand"),
        right_hand=decode_part(rec.right_hand, "right_hand"),
        root_translation=np.asarray(rec.root_translation, dtype=float),
    )


def _observation_fields(obs: KeypointObservation):
    return {"positions": _arr(obs.positions), "confidence": _arr(obs.confidence), "parts": list(obs.parts)}


def _decode_observation(rec):
    return KeypointObservation(
        positions=_two_d(rec.positions, 2),
        confidence=np.asarray(rec.confidence, dtype=float),
        parts=tuple(rec.parts),
    )


def entry_records(entry: DatasetEntry):
    """The six records of one scene: scene, observation, then one prediction per part."""
    scene = entry.scene
    head = {"schema_version": SCHEMA_VERSION, "subject_id": scene.subject_id}
    out = [
        {**head, "type": "scene", "seed": scene.seed, "camera": scene.camera.model_dump(mode="json"),
         "truth": encode_params(scene.truth)},
        {**head, "type": "observation", **_observation_fields(entry.observation)},
    ]
    for part in PARTS:
        pred = entry.predictions[part]
        out.append({
            **head, "type": "prediction", "part": part, "params": encode_part(pred.params),
            "feature": _arr(pred.feature), "valid": bool(pred.valid),
            "translation": None if pred.translation is None else _arr(pred.translation),
        })
    return out


def curated_record(sample: CuratedSample):
    scene = sample.scene
    return {
        "schema_version": SCHEMA_VERSION, "subject_id": scene.subject_id, "type": "curated",
        "seed": scene.seed, "camera": scene.camera.model_dump(mode="json"),
        "truth": encode_params(scene.truth), "pseudo": encode_params(sample.pseudo),
        "features": {part: _arr(f) for part, f in sample.features.items()},
        "observation": _observation_fields(sample.observation),
        "provenance": sample.provenance,
    }


# ============ FILES ============
def write_jsonl(path, records):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    except OSError as e:
        raise DataIOError(f"cannot write ({e.strerror})", path) from e
    return path


def read_jsonl(path):
    """Validated records with their 1-based line numbers."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataIOError(f"cannot read ({e.strerror})", path) from e
    out = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaValidationError(f"invalid JSON ({e.msg})", path, n) from e
        if not isinstance(doc, dict):
            raise SchemaValidationError("record must be a JSON object", path, n)
        version = doc.get("schema_version")
        if version is None:
            raise SchemaValidationError("missing schema_version", path, n)
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"schema_version {version} is not supported (this build reads {SCHEMA_VERSION}); "
                "regenerate the file with the `synth`/`curate` commands of this version",
                path, n,
            )
        model = RECORD_TYPES.get(doc.get("type"))
        if model is None:
            raise SchemaValidationError(f"unknown record type {doc.get('type')!r}", path, n)
        try:
            out.append((n, model.model_validate(doc)))
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(x) for x in first["loc"])
            raise SchemaValidationError(f"{where}: {first['msg']}", path, n) from e
    return out


def _checked(params, layout, path, line):
    try:
        layout.check(params)
    except ConfigurationError as e:
        raise SchemaValidationError(str(e), path, line) from e
    return params


def load_dataset(path, tpl):
    """Dataset entries in file order; every scene needs its observation and four predictions."""
    layout = tpl.layout()
    scenes, observations, predictions, order, lines = {}, {}, {}, [], {}
    for n, rec in read_jsonl(path):
        sid = rec.subject_id
        if rec.type == "scene":
            if sid in scenes:
                raise SchemaValidationError(f"duplicate scene '{sid}'", path, n)
            truth = _checked(decode_params(rec.truth), layout, path, n)
            scenes[sid] = Scene(subject_id=sid, truth=truth, camera=rec.camera, seed=rec.seed)
            order.append(sid)
            lines[sid] = n
        elif rec.type == "observation":
            obs = _decode_observation(rec)
            if len(obs) != tpl.num_keypoints or obs.positions.shape != (tpl.num_keypoints, 2):
                raise SchemaValidationError(
                    f"observation has {len(obs)} keypoints, template expects {tpl.num_keypoints}", path, n)
            observations[sid] = obs
        elif rec.type == "prediction":
            predictions.setdefault(sid, {})[rec.part] = PartPrediction(
                part=rec.part,
                params=decode_part(rec.params, rec.part),
                feature=np.asarray(rec.feature, dtype=float),
                valid=rec.valid,
                translation=None if rec.translation is None else np.asarray(rec.translation, dtype=float),
            )
        else:
            raise SchemaValidationError("curated record in a raw dataset file", path, n)

    entries = []
    for sid in order:
        if sid not in observations:
            raise SchemaValidationError(f"scene '{sid}' has no observation record", path, lines[sid])
        entries.append(DatasetEntry(scenes[sid], observations[sid], predictions.get(sid, {})))
    logger.info("loaded %d scenes from %s", len(entries), path)
    return entries


def save_dataset(path, entries):
    return write_jsonl(path, (rec for entry in entries for rec in entry_records(entry)))


def save_curated(path, samples):
    return write_jsonl(path, (curated_record(s) for s in samples))


def load_curated(path, tpl):
    layout = tpl.layout()
    samples = []
    for n, rec in read_jsonl(path):
        if rec.type != "curated":
            raise SchemaValidationError(f"expected a curated record, got '{rec.type}'", path, n)
        scene = Scene(rec.subject_id, _checked(decode_params(rec.truth), layout, path, n), rec.camera, rec.seed)
        samples.append(CuratedSample(
            scene=scene,
            pseudo=_checked(decode_params(rec.pseudo), layout, path, n),
            features={part: np.asarray(f, dtype=float) for part, f in rec.features.items()},
            observation=_decode_observation(rec.observation),
            provenance=rec.provenance,
        ))
    logger.info("loaded %d curated samples from %s", len(samples), path)
    return samples


def write_json(path, doc):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write ({e.strerror})", path) from e
    return path


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write ({e.strerror})", path) from e
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"cannot read ({e.strerror})", path) from e
    except json.JSONDecodeError as e:
        raise SchemaValidationError(f"invalid JSON ({e.msg})", path, e.lineno) from e


# ============ CHECKPOINTS ============
def _header_dims(spec: ModelSpec):
    dims = [spec.input_dim, spec.param_dim, len(spec.hidden), *spec.hidden]
    dims += [spec.student_features[k] for k in ("body", "face", "hand")]
    dims += [spec.expert_features[k] for k in ("body", "face", "hand")]
    return dims


def _spec_from_header(dims):
    input_dim, param_dim, n_hidden = dims[:3]
    hidden = tuple(dims[3:3 + n_hidden])
    rest = dims[3 + n_hidden:]
    if len(rest) != 6:
        raise ValueError("header length does not match its hidden-layer count")
    keys = ("body", "face", "hand")
    return ModelSpec(input_dim, hidden, param_dim, dict(zip(keys, rest[:3])), dict(zip(keys, rest[3:])))


def save_checkpoint(path, state: ModelState, sidecar=None):
    """Binary weights plus `<path>.json` with the ModelSpec and training snapshot."""
    path = Path(path)
    dims = _header_dims(state.spec)
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(dims))
    blob += struct.pack(f"<{len(dims)}I", *dims)
    blob += struct.pack("<Q", state.theta.size)
    blob += state.theta.astype("<f8").tobytes()
    doc = {"schema_version": SCHEMA_VERSION, "spec": state.spec.to_dict(), **(sidecar or {})}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(blob))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint ({e.strerror})", path) from e
    write_json(sidecar_path(path), doc)
    return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path):
    """(ModelState, sidecar dict)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint ({e.strerror})", path) from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaValidationError("not a checkpoint file (bad magic)", path)
    try:
        version, n_dims = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise SchemaVersionError(
                f"checkpoint version {version} is not supported (this build reads {CHECKPOINT_VERSION}); retrain",
                path)
        offset = 12
        dims = list(struct.unpack_from(f"<{n_dims}I", blob, offset))
        offset += 4 * n_dims
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        spec = _spec_from_header(dims)
    except (struct.error, ValueError) as e:
        raise SchemaValidationError(f"corrupt checkpoint header ({e})", path) from e
    if len(blob) - offset != 8 * count or count != spec.size:
        raise SchemaValidationError(f"checkpoint holds {len(blob) - offset} bytes for {count} parameters", path)
    theta = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(float)
    sidecar = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    if sidecar and ModelSpec.from_dict(sidecar["spec"]) != spec:
        raise SchemaValidationError("sidecar spec does not match the checkpoint header", sidecar_path(path))
    return ModelState(spec, theta), sidecar
