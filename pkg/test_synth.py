# test_synth.py
import numpy as np
import pytest

from body_model import PARTS
from curation import SelectionConfig, step2_validity_gate
from errors import InvalidArgumentError
from synth import (NoiseProfile, derive_seed, detect_keypoints, exact_keypoints, flatten_part, generate_scene,
                   generate_scenes, part_params, run_expert, run_experts, simulate_dataset)


def test_generate_scene_is_deterministic(dims):
    a = generate_scene(42, dims, 0.3)
    b = generate_scene(42, dims, 0.3)
    assert np.array_equal(a.truth.body.pose, b.truth.body.pose)
    assert np.array_equal(a.truth.face.expression, b.truth.face.expression)
    assert not np.array_equal(a.truth.body.pose, generate_scene(43, dims, 0.3).truth.body.pose)


def test_generate_scene_rejects_bad_scale(dims):
    with pytest.raises(InvalidArgumentError):
        generate_scene(0, dims, 0.0)


def test_truth_seams_agree_with_body(dims):
    truth = generate_scene(3, dims, 0.5).truth
    assert np.array_equal(truth.face.other_poses[0], truth.body.pose[2])
    assert np.array_equal(truth.left_hand.pose[0], truth.body.pose[5])
    assert np.array_equal(truth.right_hand.pose[0], truth.body.pose[8])


def test_body_pose_prior_spread(dims):
    scenes = generate_scenes(0, 1000, dims, 0.3)
    poses = np.stack([s.truth.body.pose for s in scenes])
    assert abs(poses.std() - 0.3) < 0.03
    assert [s.subject_id for s in scenes[:2]] == ["s000000", "s000001"]


def test_noise_free_detection_is_exact(tpl, dims):
    scene = generate_scene(8, dims, 0.3)
    obs = detect_keypoints(scene, tpl, NoiseProfile())
    assert np.array_equal(obs.positions, exact_keypoints(scene.truth, tpl, scene.camera))
    assert np.all(obs.confidence == 1.0)
    assert len(obs) == tpl.num_keypoints


def test_full_dropout_zeroes_confidence(tpl, dims):
    scene = generate_scene(8, dims, 0.3)
    obs = detect_keypoints(scene, tpl, NoiseProfile(keypoint_dropout=1.0))
    assert np.all(obs.confidence == 0.0)


def test_jitter_magnitude(tpl, dims):
    scene = generate_scene(8, dims, 0.3)
    exact = exact_keypoints(scene.truth, tpl, scene.camera)
    sigma = 2.0
    offsets = np.concatenate([
        (detect_keypoints(scene, tpl, NoiseProfile(keypoint_jitter=sigma), seed=s).positions - exact).ravel()
        for s in range(200)
    ])
    assert abs(np.mean(np.abs(offsets)) - sigma * np.sqrt(2 / np.pi)) < 0.05 * sigma * np.sqrt(2 / np.pi)


def test_noise_free_experts_return_truth(dims, feature_maps):
    scene = generate_scene(15, dims, 0.3)
    preds = run_experts(scene, NoiseProfile(), feature_maps)
    for part in PARTS:
        assert np.array_equal(flatten_part(preds[part].params), flatten_part(part_params(scene.truth, part)))
        assert preds[part].valid
    assert np.array_equal(preds["body"].translation, scene.truth.root_translation)
    assert preds["face"].translation is None
    assert preds["left_hand"].feature.shape == (feature_maps.feature_dims.hand,)


def test_invalid_outputs_fail_validity(dims, feature_maps):
    cfg = SelectionConfig()
    for seed in range(10):
        scene = generate_scene(seed, dims, 0.3)
        preds = run_experts(scene, NoiseProfile(invalid_prob=1.0), feature_maps)
        assert not any(p.valid for p in preds.values())
        passed, offending = step2_validity_gate(preds, cfg)
        assert not passed and offending == set(PARTS)


def test_unknown_part_tag(dims, feature_maps):
    with pytest.raises(InvalidArgumentError):
        run_expert("tail", generate_scene(0, dims, 0.3), NoiseProfile(), feature_maps)


def test_derive_seed_streams_differ():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_simulate_dataset_threads_agree(tpl, feature_maps):
    noise = NoiseProfile(keypoint_jitter=1.0, body_param_noise=0.05, invalid_prob=0.2)
    a = simulate_dataset(5, 12, tpl, noise, feature_maps, 0.3, threads=1)
    b = simulate_dataset(5, 12, tpl, noise, feature_maps, 0.3, threads=4)
    for x, y in zip(a, b):
        assert x.scene.subject_id == y.scene.subject_id
        assert np.array_equal(x.observation.positions, y.observation.positions)
        assert np.array_equal(x.predictions["face"].feature, y.predictions["face"].feature)


def test_tiny_prior_scale_approaches_rest_pose(tpl, dims):
    truth = generate_scene(1, dims, 1e-12).truth
    assert np.allclose(tpl.layout().to_vector(truth), 0.0, atol=1e-9)


def test_feature_maps_are_deterministic(dims, feature_maps):
    a = generate_scene(31, dims, 0.3)
    b = generate_scene(31, dims, 0.3, subject_id="copy")
    fa = run_expert("face", a, NoiseProfile(), feature_maps).feature
    fb = run_expert("face", b, NoiseProfile(), feature_maps).feature
    assert np.array_equal(fa, fb)
