# curation.py
"""Pseudo ground-truth selection (confidence count, output validity, reprojection
gate) and fusion of the surviving part predictions into full-body labels."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from body_model import (LEFT_WRIST, NECK, PARTS, RIGHT_WRIST, BodyParams, FaceParams,
                        FullBodyParams, HandParams)
from errors import FusionError, GateUndefinedError, ProjectionDomainError
from synth import exact_keypoints

logger = logging.getLogger(__name__)

GATE_TOLERANCE = 1e-9

# fixed histogram edges so per-shard reports merge by addition
STEP1_EDGES = np.arange(0, 101, 4, dtype=float)
STEP2_EDGES = np.arange(0, 6, dtype=float)
STEP3_EDGES = np.linspace(0.0, 5.0, 21)


class SelectionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    body_threshold: float = Field(default=0.1, gt=0, lt=1)
    hand_threshold: float = Field(default=0.2, gt=0, lt=1)
    face_threshold: float = Field(default=0.4, gt=0, lt=1)
    min_keypoints: int = Field(default=12, ge=0)
    rmse_gate_cm: float = Field(default=1.5, gt=0)
    axis_angle_bound: float = Field(default=2.0 * np.pi, gt=0)
    coefficient_bound: float = Field(default=5.0, gt=0)
    # false keeps every finite prediction (no confidence or reprojection gates)
    enabled: bool = True

    def threshold(self, tag):
        return {"body": self.body_threshold, "hand": self.hand_threshold, "face": self.face_threshold}[tag]

    def thresholds(self, parts):
        return np.array([self.threshold(tag) for tag in parts])


@dataclass(frozen=True)
class CuratedSample:
    scene: object            # synth.Scene
    pseudo: FullBodyParams
    features: dict           # part -> pseudo feature vector
    observation: object      # synth.KeypointObservation
    provenance: dict

    @property
    def subject_id(self):
        return self.scene.subject_id


def _hist(values, edges):
    values = np.minimum(np.asarray(values, dtype=float), edges[-1])
    return np.histogram(values, bins=edges)[0]


@dataclass
class CurationReport:
    input: int = 0
    discarded_step1: int = 0
    discarded_step2: int = 0
    discarded_step3: int = 0
    gate_undefined: int = 0
    kept: int = 0
    step1_hist: np.ndarray = field(default_factory=lambda: np.zeros(len(STEP1_EDGES) - 1, dtype=int))
    step2_hist: np.ndarray = field(default_factory=lambda: np.zeros(len(STEP2_EDGES) - 1, dtype=int))
    step3_hist: np.ndarray = field(default_factory=lambda: np.zeros(len(STEP3_EDGES) - 1, dtype=int))

    def merge(self, other):
        """Associative combination of two shard reports."""
        return CurationReport(
            input=self.input + other.input,
            discarded_step1=self.discarded_step1 + other.discarded_step1,
            discarded_step2=self.discarded_step2 + other.discarded_step2,
            discarded_step3=self.discarded_step3 + other.discarded_step3,
            gate_undefined=self.gate_undefined + other.gate_undefined,
            kept=self.kept + other.kept,
            step1_hist=self.step1_hist + other.step1_hist,
            step2_hist=self.step2_hist + other.step2_hist,
            step3_hist=self.step3_hist + other.step3_hist,
        )

    def check(self):
        total = self.discarded_step1 + self.discarded_step2 + self.discarded_step3 + self.gate_undefined + self.kept
        return total == self.input

    def to_dict(self):
        return {
            "input": self.input,
            "discarded": {
                "step1": self.discarded_step1,
                "step2": self.discarded_step2,
                "step3": self.discarded_step3,
                "gate_undefined": self.gate_undefined,
            },
            "kept": self.kept,
            "histograms": {
                "step1_count": {"edges": STEP1_EDGES.tolist(), "counts": self.step1_hist.tolist()},
                "step2_offending_parts": {"edges": STEP2_EDGES.tolist(), "counts": self.step2_hist.tolist()},
                "step3_rmse_cm": {"edges": STEP3_EDGES.tolist(), "counts": self.step3_hist.tolist()},
            },
        }


# ============ STEP 1 ============
def step1_confidence_gate(obs, cfg: SelectionConfig):
    """Pooled count of keypoints above their part threshold; (passed, count)."""
    confident = np.asarray(obs.confidence) > cfg.thresholds(obs.parts)
    count = int(np.count_nonzero(confident))
    return count >= cfg.min_keypoints, count


# ============ STEP 2 ============
def _pose_and_coefficients(params):
    if isinstance(params, BodyParams):
        return [params.pose], [params.shape]
    if isinstance(params, FaceParams):
        return [params.jaw_pose, params.other_poses], [params.expression]
    return [params.pose], [params.shape]


def prediction_offends(pred, cfg: SelectionConfig, finite_only=False):
    poses, coefficients = _pose_and_coefficients(pred.params)
    arrays = poses + coefficients
    if pred.translation is not None:
        arrays = arrays + [pred.translation]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        return True
    if finite_only:
        return False
    if not pred.valid:
        return True
    if any(np.any(np.abs(p) > cfg.axis_angle_bound) for p in poses):
        return True
    return any(np.any(np.abs(c) > cfg.coefficient_bound) for c in coefficients)


def step2_validity_gate(preds, cfg: SelectionConfig, finite_only=False):
    """(passed, offending parts). Missing predictions count as offending."""
    offending = set()
    for part in PARTS:
        pred = preds.get(part)
        if pred is None or prediction_offends(pred, cfg, finite_only):
            offending.add(part)
    return not offending, offending


# ============ FUSION ============
def _expect(pred, part, cls):
    if pred is None:
        raise FusionError(f"missing {part} prediction")
    if pred.part != part or not isinstance(pred.params, cls):
        raise FusionError(f"expected a {part} prediction, got '{pred.part}'")
    return pred.params


def fuse(body, face, left_hand, right_hand):
    """Integrate the four part predictions into one full-body label.

    At the seams (neck, wrists) the body expert's rotation replaces the value the
    face and hand experts predicted; their part-local poses are kept unchanged.
    """
    b = _expect(body, "body", BodyParams)
    f = _expect(face, "face", FaceParams)
    lh = _expect(left_hand, "left_hand", HandParams)
    rh = _expect(right_hand, "right_hand", HandParams)

    other = f.other_poses.copy()
    if len(other):
        other[0] = b.pose[NECK]
    left_pose = lh.pose.copy()
    left_pose[0] = b.pose[LEFT_WRIST]
    right_pose = rh.pose.copy()
    right_pose[0] = b.pose[RIGHT_WRIST]

    translation = body.translation if body.translation is not None else np.zeros(3)
    return FullBodyParams(
        body=BodyParams(b.pose.copy(), b.shape.copy()),
        face=FaceParams(f.jaw_pose.copy(), other, f.expression.copy()),
        left_hand=HandParams(left_pose, lh.shape.copy(), "left"),
        right_hand=HandParams(right_pose, rh.shape.copy(), "right"),
        root_translation=np.array(translation, dtype=float),
    )


def seam_disagreement(preds):
    """Angle-vector distance between the body expert and the part experts at each seam."""
    body_pose = preds["body"].params.pose
    out = {}
    other = preds["face"].params.other_poses
    if len(other):
        out["neck"] = float(np.linalg.norm(other[0] - body_pose[NECK]))
    out["left_wrist"] = float(np.linalg.norm(preds["left_hand"].params.pose[0] - body_pose[LEFT_WRIST]))
    out["right_wrist"] = float(np.linalg.norm(preds["right_hand"].params.pose[0] - body_pose[RIGHT_WRIST]))
    return out


# ============ STEP 3 ============
def reprojection_rmse_cm(fused, obs, camera, tpl, cfg: SelectionConfig):
    """RMSE at the subject plane over the confident keypoints, in centimeters."""
    selected = np.asarray(obs.confidence) > cfg.thresholds(obs.parts)
    if not np.any(selected):
        raise GateUndefinedError("no keypoint passes its confidence threshold")
    projected = exact_keypoints(fused, tpl, camera)
    err = np.linalg.norm(projected[selected] - np.asarray(obs.positions)[selected], axis=1)
    rmse_px = float(np.sqrt(np.mean(err**2)))
    return rmse_px * camera.subject_depth * 100.0 / camera.focal_length


def step3_reprojection_gate(fused, obs, camera, tpl, cfg: SelectionConfig):
    """(passed, rmse_cm); raises GateUndefinedError with no confident keypoints."""
    rmse_cm = reprojection_rmse_cm(fused, obs, camera, tpl, cfg)
    return rmse_cm <= cfg.rmse_gate_cm + GATE_TOLERANCE, rmse_cm


# ============ PIPELINE ============
def curate_entry(entry, tpl, cfg: SelectionConfig):
    """Run one dataset entry through the gates; (outcome, sample or None, scores)."""
    preds = entry.predictions
    scores = {}
    if cfg.enabled:
        passed, count = step1_confidence_gate(entry.observation, cfg)
        scores["step1_count"] = count
        if not passed:
            return "step1", None, scores

    passed, offending = step2_validity_gate(preds, cfg, finite_only=not cfg.enabled)
    scores["step2_offending"] = sorted(offending)
    if not passed:
        return "step2", None, scores

    fused = fuse(preds["body"], preds["face"], preds["left_hand"], preds["right_hand"])
    if cfg.enabled:
        try:
            passed, rmse_cm = step3_reprojection_gate(fused, entry.observation, entry.scene.camera, tpl, cfg)
        except (GateUndefinedError, ProjectionDomainError) as exc:
            logger.warning("%s: reprojection gate undefined (%s), discarded", entry.scene.subject_id, exc)
            return "gate_undefined", None, scores
        scores["step3_rmse_cm"] = rmse_cm
        if not passed:
            return "step3", None, scores

    provenance = {
        "steps": ["step1", "step2", "step3"] if cfg.enabled else ["step2"],
        **scores,
        "seam_disagreement": seam_disagreement(preds),
    }
    sample = CuratedSample(
        scene=entry.scene,
        pseudo=fused,
        features={part: np.asarray(preds[part].feature, dtype=float) for part in PARTS},
        observation=entry.observation,
        provenance=provenance,
    )
    return "kept", sample, scores


def curate(entries, tpl, cfg: SelectionConfig, threads=1):
    """Apply the gates in order with short-circuit discard; (samples, report)."""
    entries = list(entries)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda e: curate_entry(e, tpl, cfg), entries))
    else:
        results = [curate_entry(e, tpl, cfg) for e in entries]

    report = CurationReport(input=len(entries))
    samples, step1_counts, step2_counts, step3_rmse = [], [], [], []
    for outcome, sample, scores in results:
        if outcome == "step1":
            report.discarded_step1 += 1
        elif outcome == "step2":
            report.discarded_step2 += 1
        elif outcome == "step3":
            report.discarded_step3 += 1
        elif outcome == "gate_undefined":
            report.gate_undefined += 1
        else:
            report.kept += 1
            samples.append(sample)
        if "step1_count" in scores:
            step1_counts.append(scores["step1_count"])
        if "step2_offending" in scores:
            step2_counts.append(len(scores["step2_offending"]))
        if "step3_rmse_cm" in scores:
            step3_rmse.append(scores["step3_rmse_cm"])
    report.step1_hist = _hist(step1_counts, STEP1_EDGES)
    report.step2_hist = _hist(step2_counts, STEP2_EDGES)
    report.step3_hist = _hist(step3_rmse, STEP3_EDGES)

    logger.info("curation: kept %d/%d (step1 %d, step2 %d, step3 %d, undefined %d)",
                report.kept, report.input, report.discarded_step1, report.discarded_step2,
                report.discarded_step3, report.gate_undefined)
    return samples, report
