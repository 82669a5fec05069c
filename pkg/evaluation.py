# evaluation.py
"""Evaluation metrics (MPJPE variants, V2V, PA-P2S, F@t) and report rendering.

Inputs are in meters, every reported distance is in millimeters.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from body_model import forward_kinematics
from errors import ConfigurationError, InvalidArgumentError
from geometry import align_points
from learn import forward_batch, observation_vector

logger = logging.getLogger(__name__)

MM = 1000.0
ALIGNMENTS = ("none", "pelvis", "procrustes")
PA_V2V_KEYS = ("full", "body", "left_hand", "right_hand", "face")
DEFAULT_F_THRESHOLDS = (5.0, 15.0)
F_TOLERANCE = 1e-9


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidArgumentError(f"expected corresponded N x 3 sets, got {pred.shape} and {gt.shape}")
    return pred, gt


def _aligned(pred, gt, alignment, with_scale=True):
    if alignment == "none":
        return pred
    if alignment == "pelvis":
        return pred - pred[0] + gt[0]
    if alignment == "procrustes":
        return align_points(pred, gt, with_scale=with_scale)
    raise InvalidArgumentError(f"unknown alignment '{alignment}' (expected one of {', '.join(ALIGNMENTS)})")


def mpjpe(pred, gt, alignment="none", with_scale=True):
    """Mean per-joint position error in mm; pelvis alignment uses joint 0 as the root."""
    pred, gt = _pair(pred, gt)
    moved = _aligned(pred, gt, alignment, with_scale)
    return float(np.mean(np.linalg.norm(moved - gt, axis=1)) * MM)


def v2v(pred, gt, alignment="none", part_mask=None, align_on="part", with_scale=True):
    """Marker-to-marker error in mm, optionally restricted to one part's markers.

    With `align_on="part"` the alignment is fitted on the masked markers only;
    `"full"` fits it on every marker and then measures the masked ones.
    """
    pred, gt = _pair(pred, gt)
    mask = np.ones(len(pred), dtype=bool) if part_mask is None else np.asarray(part_mask, dtype=bool)
    if not mask.any():
        raise InvalidArgumentError("part mask selects no markers")
    if align_on == "part":
        moved = _aligned(pred[mask], gt[mask], alignment, with_scale)
        return float(np.mean(np.linalg.norm(moved - gt[mask], axis=1)) * MM)
    if align_on == "full":
        moved = _aligned(pred, gt, alignment, with_scale)
        return float(np.mean(np.linalg.norm(moved[mask] - gt[mask], axis=1)) * MM)
    raise InvalidArgumentError(f"align_on must be 'part' or 'full', got '{align_on}'")


def p2s_distances(pred_face, gt_face, align=True):
    """Distance (mm) from each predicted face marker to its nearest ground-truth marker."""
    pred, gt = _pair(pred_face, gt_face)
    if len(pred) < 3:
        raise InvalidArgumentError(f"need at least 3 face markers, got {len(pred)}")
    if align:
        pred = align_points(pred, gt)
    dist, _ = cKDTree(gt).query(pred)
    return dist * MM


def summarize(distances):
    d = np.asarray(distances, dtype=float)
    return {"median": float(np.median(d)), "mean": float(np.mean(d)), "std": float(np.std(d))}


def pa_p2s(pred_face, gt_face, align=True):
    """{median, mean, std} in mm of the point-to-nearest-marker distances."""
    return summarize(p2s_distances(pred_face, gt_face, align))


def f_score(pred, gt, threshold_mm, align=True):
    """Fraction of corresponded markers within threshold (inclusive) after alignment."""
    pred, gt = _pair(pred, gt)
    if align:
        pred = align_points(pred, gt)
    dist = np.linalg.norm(pred - gt, axis=1) * MM
    return float(np.mean(dist <= threshold_mm + F_TOLERANCE))


# ============ REPORT ============
@dataclass
class MetricReport:
    mpjpe: float = 0.0
    pelvis_mpjpe: float = 0.0
    pa_mpjpe: float = 0.0
    v2v: float = 0.0
    pa_v2v: dict = field(default_factory=lambda: {k: 0.0 for k in PA_V2V_KEYS})
    pa_p2s: dict = field(default_factory=lambda: {"median": 0.0, "mean": 0.0, "std": 0.0})
    f_at: dict = field(default_factory=dict)   # threshold mm -> fraction
    count: int = 0

    def to_dict(self):
        return {
            "mpjpe": self.mpjpe,
            "pelvis_mpjpe": self.pelvis_mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "v2v": self.v2v,
            "pa_v2v": dict(self.pa_v2v),
            "pa_p2s": dict(self.pa_p2s),
            "f_at": {f"{t:g}": v for t, v in self.f_at.items()},
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            mpjpe=doc["mpjpe"], pelvis_mpjpe=doc["pelvis_mpjpe"], pa_mpjpe=doc["pa_mpjpe"], v2v=doc["v2v"],
            pa_v2v=dict(doc["pa_v2v"]), pa_p2s=dict(doc["pa_p2s"]),
            f_at={float(t): v for t, v in doc["f_at"].items()}, count=doc["count"],
        )

    def to_row(self):
        """Flat column -> value mapping for tables and CSVs."""
        row = {"mpjpe": self.mpjpe, "pelvis_mpjpe": self.pelvis_mpjpe, "pa_mpjpe": self.pa_mpjpe, "v2v": self.v2v}
        row.update({f"pa_v2v_{k}": v for k, v in self.pa_v2v.items()})
        row.update({f"pa_p2s_{k}": v for k, v in self.pa_p2s.items()})
        row.update({f"f@{t:g}mm": v for t, v in self.f_at.items()})
        row["count"] = self.count
        return row


def sample_metrics(pred_joints, pred_markers, gt_joints, gt_markers, tpl, thresholds=DEFAULT_F_THRESHOLDS):
    """Every per-sample metric plus the face distances feeding PA-P2S."""
    body_j = tpl.joint_mask("body")
    row = {
        "mpjpe": mpjpe(pred_joints[body_j], gt_joints[body_j]),
        "pelvis_mpjpe": mpjpe(pred_joints[body_j], gt_joints[body_j], "pelvis"),
        "pa_mpjpe": mpjpe(pred_joints[body_j], gt_joints[body_j], "procrustes"),
        "v2v": v2v(pred_markers, gt_markers),
        "pa_v2v_full": v2v(pred_markers, gt_markers, "procrustes"),
    }
    for part in ("body", "left_hand", "right_hand", "face"):
        row[f"pa_v2v_{part}"] = v2v(pred_markers, gt_markers, "procrustes", tpl.marker_mask(part))
    for t in thresholds:
        per_hand = [f_score(pred_markers[tpl.marker_mask(h)], gt_markers[tpl.marker_mask(h)], t)
                    for h in ("left_hand", "right_hand")]
        row[f"f_{t:g}"] = float(np.mean(per_hand))
    face = tpl.marker_mask("face")
    return row, p2s_distances(pred_markers[face], gt_markers[face])


def evaluate_params(preds, truths, tpl, thresholds=DEFAULT_F_THRESHOLDS):
    """MetricReport of predicted vs ground-truth FullBodyParams lists."""
    if len(preds) != len(truths):
        raise InvalidArgumentError(f"{len(preds)} predictions for {len(truths)} ground-truth samples")
    if not preds:
        raise InvalidArgumentError("nothing to evaluate")
    rows, face = [], []
    for pred, truth in zip(preds, truths):
        pj, pm = forward_kinematics(pred, tpl)
        gj, gm = forward_kinematics(truth, tpl)
        row, dist = sample_metrics(pj, pm, gj, gm, tpl, thresholds)
        rows.append(row)
        face.append(dist)
    means = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    return MetricReport(
        mpjpe=float(means["mpjpe"]),
        pelvis_mpjpe=float(means["pelvis_mpjpe"]),
        pa_mpjpe=float(means["pa_mpjpe"]),
        v2v=float(means["v2v"]),
        pa_v2v={k: float(means[f"pa_v2v_{k}"]) for k in PA_V2V_KEYS},
        pa_p2s=summarize(np.concatenate(face)),
        f_at={float(t): float(means[f"f_{t:g}"]) for t in thresholds},
        count=len(rows),
    )


def evaluate(state, entries, tpl, thresholds=DEFAULT_F_THRESHOLDS):
    """Run the regressor over scenes with observations and score it against their truth."""
    if state.spec.input_dim != 3 * tpl.num_keypoints or state.spec.param_dim != tpl.layout().size:
        raise ConfigurationError(
            f"checkpoint expects {state.spec.input_dim // 3} keypoints / {state.spec.param_dim} parameters, "
            f"dataset has {tpl.num_keypoints} / {tpl.layout().size}"
        )
    entries = list(entries)
    if not entries:
        raise InvalidArgumentError("evaluation set is empty")
    inputs = np.stack([
        observation_vector(e.observation.positions, e.observation.confidence, e.scene.camera) for e in entries
    ])
    outputs = forward_batch(state, inputs).params
    layout = tpl.layout()
    preds = [layout.from_vector(v) for v in outputs]
    report = evaluate_params(preds, [e.scene.truth for e in entries], tpl, thresholds)
    logger.info("evaluated %d samples: PA-MPJPE %.2f mm", report.count, report.pa_mpjpe)
    return report


def format_report(report: MetricReport):
    """Aligned two-column text table."""
    frame = pd.DataFrame({"metric": list(report.to_row()), "value": list(report.to_row().values())})
    return frame.to_string(index=False, float_format=lambda v: f"{v:.3f}")


def reports_frame(named_reports):
    """One row per (name, MetricReport) pair."""
    rows = [{"run": name, **report.to_row()} for name, report in named_reports]
    return pd.DataFrame(rows)
