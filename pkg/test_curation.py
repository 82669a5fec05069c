# test_curation.py
from dataclasses import replace

import numpy as np
import pytest

from body_model import BodyParams, HandParams
from curation import (CurationReport, SelectionConfig, curate, fuse, reprojection_rmse_cm, step1_confidence_gate,
                      step2_validity_gate, step3_reprojection_gate)
from errors import FusionError, GateUndefinedError
from synth import KeypointObservation, NoiseProfile, exact_keypoints, flatten_part, simulate_dataset

NOISY = NoiseProfile(keypoint_jitter=1.5, body_param_noise=0.005, face_param_noise=0.005, hand_param_noise=0.005,
                     invalid_prob=0.05, gross_error_prob=0.2)


def _with_confidence(obs, confidence):
    return KeypointObservation(obs.positions, np.asarray(confidence, dtype=float), obs.parts)


def _confident_body(obs, n):
    conf = np.zeros(len(obs))
    body = [i for i, tag in enumerate(obs.parts) if tag == "body"]
    conf[body[:n]] = 0.5
    return _with_confidence(obs, conf)


# --- step 1 ---
def test_step1_boundary(clean_entry):
    cfg = SelectionConfig()
    assert step1_confidence_gate(_confident_body(clean_entry.observation, 12), cfg) == (True, 12)
    assert step1_confidence_gate(_confident_body(clean_entry.observation, 11), cfg) == (False, 11)
    zero = _with_confidence(clean_entry.observation, np.zeros(len(clean_entry.observation)))
    assert step1_confidence_gate(zero, cfg) == (False, 0)


def test_step1_uses_part_thresholds(clean_entry):
    obs = clean_entry.observation
    # 0.3 clears body (0.1) and hand (0.2) but not face (0.4)
    passed, count = step1_confidence_gate(_with_confidence(obs, np.full(len(obs), 0.3)), SelectionConfig())
    assert count == sum(tag != "face" for tag in obs.parts)


# --- step 2 ---
def test_step2_nan_and_coefficient_bound(clean_entry):
    cfg = SelectionConfig()
    preds = dict(clean_entry.predictions)
    assert step2_validity_gate(preds, cfg) == (True, set())

    body = preds["body"]
    pose = body.params.pose.copy()
    pose[3, 1] = np.nan
    broken = dict(preds, body=replace(body, params=BodyParams(pose, body.params.shape)))
    assert step2_validity_gate(broken, cfg) == (False, {"body"})

    hand = preds["left_hand"]
    for value, ok in ((5.0, True), (5.01, False)):
        shape = hand.params.shape.copy()
        shape[0] = value
        changed = dict(preds, left_hand=replace(hand, params=HandParams(hand.params.pose, shape, "left")))
        assert step2_validity_gate(changed, cfg)[0] is ok


def test_step2_missing_part_offends(clean_entry):
    preds = dict(clean_entry.predictions)
    del preds["face"]
    assert step2_validity_gate(preds, SelectionConfig()) == (False, {"face"})


# --- step 3 ---
@pytest.mark.parametrize("shift_px,passed,rmse", [(5.0, True, 1.5), (20.0 / 3.0, False, 2.0)])
def test_step3_gate_boundary(clean_entry, tpl, shift_px, passed, rmse):
    scene = clean_entry.scene
    exact = exact_keypoints(scene.truth, tpl, scene.camera)
    obs = KeypointObservation(exact + np.array([shift_px, 0.0]), np.ones(len(exact)), tuple(tpl.keypoint_part))
    ok, rmse_cm = step3_reprojection_gate(scene.truth, obs, scene.camera, tpl, SelectionConfig())
    assert ok is passed
    assert np.isclose(rmse_cm, rmse)


def test_step3_undefined_without_confident_keypoints(clean_entry, tpl):
    obs = _with_confidence(clean_entry.observation, np.zeros(len(clean_entry.observation)))
    with pytest.raises(GateUndefinedError):
        reprojection_rmse_cm(clean_entry.scene.truth, obs, clean_entry.scene.camera, tpl, SelectionConfig())


# --- fusion ---
def test_fuse_noise_free_predictions_is_truth(clean_entry, tpl):
    p = clean_entry.predictions
    fused = fuse(p["body"], p["face"], p["left_hand"], p["right_hand"])
    lay = tpl.layout()
    assert np.array_equal(lay.to_vector(fused), lay.to_vector(clean_entry.scene.truth))


def test_fuse_resolves_wrist_with_body(clean_entry):
    p = clean_entry.predictions
    hand = p["left_hand"]
    pose = hand.params.pose.copy()
    pose[0] += 0.4
    pose[1] += 0.1
    conflict = replace(hand, params=HandParams(pose, hand.params.shape, "left"))
    fused = fuse(p["body"], p["face"], conflict, p["right_hand"])
    assert np.array_equal(fused.left_hand.pose[0], p["body"].params.pose[5])
    assert np.array_equal(fused.left_hand.pose[1:], pose[1:])


def test_fuse_missing_or_mismatched_part(clean_entry):
    p = clean_entry.predictions
    with pytest.raises(FusionError):
        fuse(p["body"], None, p["left_hand"], p["right_hand"])
    with pytest.raises(FusionError):
        fuse(p["body"], p["face"], p["right_hand"], p["right_hand"])


# --- pipeline ---
def test_curate_noise_free_keeps_everything(tpl, feature_maps):
    entries = simulate_dataset(1, 8, tpl, NoiseProfile(), feature_maps, 0.3)
    samples, report = curate(entries, tpl, SelectionConfig())
    assert report.kept == 8 and report.check()
    for s in samples:
        assert s.provenance["step3_rmse_cm"] == pytest.approx(0.0, abs=1e-9)
        assert s.provenance["steps"] == ["step1", "step2", "step3"]


def test_curate_all_invalid(tpl, feature_maps):
    entries = simulate_dataset(1, 6, tpl, NoiseProfile(invalid_prob=1.0), feature_maps, 0.3)
    samples, report = curate(entries, tpl, SelectionConfig())
    assert samples == [] and report.discarded_step2 == 6 and report.check()


def test_curate_planted_counts(tpl, feature_maps):
    entries = simulate_dataset(2, 10, tpl, NoiseProfile(), feature_maps, 0.3)
    planted = []
    for i, e in enumerate(entries):
        if i < 2:
            e = replace(e, observation=_with_confidence(e.observation, np.zeros(len(e.observation))))
        elif i < 5:
            body = e.predictions["body"]
            shape = body.params.shape.copy()
            shape[0] = np.nan
            body = replace(body, params=BodyParams(body.params.pose, shape))
            e = replace(e, predictions=dict(e.predictions, body=body))
        elif i < 7:
            obs = e.observation
            e = replace(e, observation=KeypointObservation(obs.positions + 20.0, obs.confidence, obs.parts))
        planted.append(e)
    samples, report = curate(planted, tpl, SelectionConfig())
    assert (report.discarded_step1, report.discarded_step2, report.discarded_step3, report.kept) == (2, 3, 2, 3)
    assert report.check()
    assert report.step2_hist[1] == 3


def test_stricter_gate_keeps_a_subset(tpl, feature_maps):
    entries = simulate_dataset(3, 30, tpl, NOISY, feature_maps, 0.3)
    loose = {s.subject_id for s in curate(entries, tpl, SelectionConfig(rmse_gate_cm=3.0))[0]}
    strict = {s.subject_id for s in curate(entries, tpl, SelectionConfig(rmse_gate_cm=0.5))[0]}
    assert strict <= loose


def test_curate_is_order_independent(tpl, feature_maps):
    entries = simulate_dataset(4, 20, tpl, NOISY, feature_maps, 0.3)
    forward, rep_f = curate(entries, tpl, SelectionConfig())
    backward, rep_b = curate(entries[::-1], tpl, SelectionConfig(), threads=3)
    assert {s.subject_id for s in forward} == {s.subject_id for s in backward}
    assert rep_f.to_dict() == rep_b.to_dict()


def test_provenance_rmse_recomputes(tpl, feature_maps):
    entries = simulate_dataset(5, 15, tpl, NOISY, feature_maps, 0.3)
    cfg = SelectionConfig()
    samples, _ = curate(entries, tpl, cfg)
    assert samples
    for s in samples:
        again = reprojection_rmse_cm(s.pseudo, s.observation, s.scene.camera, tpl, cfg)
        assert again == pytest.approx(s.provenance["step3_rmse_cm"], abs=1e-9)
        assert again <= cfg.rmse_gate_cm + 1e-9
        assert set(s.provenance["seam_disagreement"]) == {"neck", "left_wrist", "right_wrist"}


def test_reports_merge_across_shards(tpl, feature_maps):
    entries = simulate_dataset(6, 20, tpl, NOISY, feature_maps, 0.3)
    cfg = SelectionConfig()
    _, whole = curate(entries, tpl, cfg)
    _, a = curate(entries[:7], tpl, cfg)
    _, b = curate(entries[7:], tpl, cfg)
    assert a.merge(b).to_dict() == whole.to_dict()
    assert CurationReport().merge(whole).to_dict() == whole.to_dict()


def test_disabled_selection_keeps_finite_predictions(tpl, feature_maps):
    entries = simulate_dataset(7, 5, tpl, NoiseProfile(), feature_maps, 0.3)
    blind = [replace(e, observation=_with_confidence(e.observation, np.zeros(len(e.observation)))) for e in entries]
    samples, report = curate(blind, tpl, SelectionConfig(enabled=False))
    assert report.kept == 5
    assert samples[0].provenance["steps"] == ["step2"]
    assert np.array_equal(flatten_part(samples[0].pseudo.body), flatten_part(entries[0].predictions["body"].params))


# --- edge records ---
def test_flagged_invalid_prediction_offends(clean_entry):
    preds = dict(clean_entry.predictions)
    flagged = dict(preds, face=replace(preds["face"], valid=False))
    assert step2_validity_gate(flagged, SelectionConfig()) == (False, {"face"})
    # finite values still pass when only finiteness is checked
    assert step2_validity_gate(flagged, SelectionConfig(), finite_only=True) == (True, set())


def test_label_behind_the_camera_is_gate_undefined(tpl, feature_maps):
    entries = simulate_dataset(8, 4, tpl, NoiseProfile(), feature_maps, 0.3)
    body = entries[1].predictions["body"]
    moved = replace(body, translation=body.translation + np.array([0.0, 0.0, -4.0]))
    entries[1] = replace(entries[1], predictions=dict(entries[1].predictions, body=moved))
    samples, report = curate(entries, tpl, SelectionConfig())
    assert report.gate_undefined == 1 and report.kept == 3 and report.check()
    assert entries[1].scene.subject_id not in {s.subject_id for s in samples}


@pytest.mark.parametrize("part,threshold", [("body", 0.1), ("hand", 0.2), ("face", 0.4)])
def test_step1_part_threshold_is_strict(clean_entry, part, threshold):
    obs = clean_entry.observation
    cfg = SelectionConfig(min_keypoints=0)
    members = np.array([tag == part for tag in obs.parts])
    for value, counted in ((threshold, 0), (threshold + 0.01, int(members.sum()))):
        conf = np.where(members, value, 0.0)
        assert step1_confidence_gate(_with_confidence(obs, conf), cfg) == (True, counted)


def test_looser_step1_settings_pass_a_superset(clean_entry, rng):
    obs = clean_entry.observation
    strict = SelectionConfig(body_threshold=0.3, hand_threshold=0.4, face_threshold=0.6, min_keypoints=30)
    looser = (
        SelectionConfig(body_threshold=0.2, hand_threshold=0.3, face_threshold=0.5, min_keypoints=30),
        SelectionConfig(body_threshold=0.3, hand_threshold=0.4, face_threshold=0.6, min_keypoints=20),
    )
    for _ in range(200):
        sampled = _with_confidence(obs, rng.uniform(0.0, 1.0, size=len(obs)))
        passed, count = step1_confidence_gate(sampled, strict)
        for cfg in looser:
            loose_passed, loose_count = step1_confidence_gate(sampled, cfg)
            assert loose_count >= count
            assert loose_passed or not passed


@pytest.mark.parametrize("shifts_px", [(5.0,), (3.0, 4.0)])
def test_step3_rmse_of_a_fused_expert_label(tpl, feature_maps, shifts_px, rng):
    noise = NoiseProfile(body_param_noise=0.05, face_param_noise=0.05, hand_param_noise=0.05)
    entry = simulate_dataset(9, 1, tpl, noise, feature_maps, 0.3)[0]
    p = entry.predictions
    fused = fuse(p["body"], p["face"], p["left_hand"], p["right_hand"])
    camera = entry.scene.camera
    projected = exact_keypoints(fused, tpl, camera)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=len(projected))
    lengths = np.resize(np.asarray(shifts_px), len(projected))
    offsets = lengths[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    obs = KeypointObservation(projected + offsets, np.ones(len(projected)), tuple(tpl.keypoint_part))
    rmse_px = np.sqrt(np.mean(lengths**2))
    expected_cm = rmse_px * camera.subject_depth * 100.0 / camera.focal_length
    ok, rmse_cm = step3_reprojection_gate(fused, obs, camera, tpl, SelectionConfig())
    assert rmse_cm == pytest.approx(expected_cm, rel=1e-9)
    assert ok is (expected_cm <= 1.5 + 1e-9)
    # the fused label is not the truth, so the truth reprojects differently
    assert not np.allclose(projected, exact_keypoints(entry.scene.truth, tpl, camera))
