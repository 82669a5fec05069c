# synth.py
"""Synthetic scenes, a simulated 2D keypoint detector and simulated part experts."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from body_model import (PARTS, BodyParams, FaceParams, FullBodyParams, HandParams, ModelDims,
                        SkeletonTemplate, fk_batch, keypoints_from)
from errors import InvalidArgumentError
from geometry import Camera, canonicalize, project

logger = logging.getLogger(__name__)

# per-group std multipliers on pose_prior_scale
PRIOR_GROUPS = {
    "body_pose": 1.0,
    "body_shape": 2.0,
    "face_pose": 0.5,
    "expression": 2.0,
    "hand_pose": 1.0,
    "hand_shape": 2.0,
    "root_translation": 0.1,
}
SYNTH_RANGE = 3.0
CONFIDENCE_EPS = 1e-9

# seed streams derived from a scene seed
STREAM_DETECT = 1
STREAM_EXPERT = {"body": 2, "face": 3, "left_hand": 4, "right_hand": 5}


class NoiseProfile(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    keypoint_jitter: float = Field(default=0.0, ge=0)      # pixels
    keypoint_dropout: float = Field(default=0.0, ge=0, le=1)
    body_param_noise: float = Field(default=0.0, ge=0)     # radians / unitless
    face_param_noise: float = Field(default=0.0, ge=0)
    hand_param_noise: float = Field(default=0.0, ge=0)
    feature_noise: float = Field(default=0.0, ge=0)
    invalid_prob: float = Field(default=0.0, ge=0, le=1)
    gross_error_prob: float = Field(default=0.0, ge=0, le=1)
    gross_error_magnitude: float = Field(default=0.5, ge=0)

    def param_noise(self, part):
        if part == "body":
            return self.body_param_noise
        if part == "face":
            return self.face_param_noise
        return self.hand_param_noise


class FeatureDims(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    body: int = Field(default=2048, ge=1)
    face: int = Field(default=512, ge=1)
    hand: int = Field(default=512, ge=1)

    @classmethod
    def toy(cls):
        return cls(body=32, face=16, hand=16)

    def for_part(self, part):
        if part in ("left_hand", "right_hand", "hand"):
            return self.hand
        return getattr(self, part)


@dataclass(frozen=True)
class Scene:
    subject_id: str
    truth: FullBodyParams
    camera: Camera
    seed: int


@dataclass(frozen=True)
class KeypointObservation:
    positions: np.ndarray    # (K, 2) pixels
    confidence: np.ndarray   # (K,) in [0, 1]
    parts: tuple             # (K,) body | hand | face

    def __len__(self):
        return len(self.parts)


@dataclass(frozen=True)
class PartPrediction:
    part: str
    params: object           # BodyParams | FaceParams | HandParams
    feature: np.ndarray
    valid: bool = True
    translation: np.ndarray = None  # body expert only: root translation estimate


def derive_seed(*entropy):
    """64-bit seed from a tuple of integers (master seed, index, stream...)."""
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1, np.uint64)[0])


def scene_seeds(master_seed, count):
    return [derive_seed(master_seed, i) for i in range(count)]


# ============ SCENES ============
def generate_scene(seed, dims: ModelDims, pose_prior_scale, camera: Camera = None, subject_id=None):
    """Draw ground-truth parameters from zero-mean Gaussians; deterministic in seed."""
    if not pose_prior_scale > 0:
        raise InvalidArgumentError(f"pose_prior_scale must be > 0, got {pose_prior_scale}")
    rng = np.random.default_rng(seed)
    s = pose_prior_scale
    g = PRIOR_GROUPS

    def draw(shape, group, clip=None):
        x = rng.normal(0.0, s * g[group], size=shape)
        return np.clip(x, -clip, clip) if clip is not None else x

    body_pose = canonicalize(draw((dims.body_joints, 3), "body_pose"))
    body_shape = draw(dims.body_shape, "body_shape", SYNTH_RANGE)
    jaw = canonicalize(draw(3, "face_pose"))
    others = canonicalize(draw((dims.face_joints - 1, 3), "face_pose"))
    expression = draw(dims.expression_dims, "expression", SYNTH_RANGE)
    hands = {}
    for side in ("left", "right"):
        hands[side] = (
            canonicalize(draw((dims.hand_joints, 3), "hand_pose")),
            draw(dims.hand_shape, "hand_shape", SYNTH_RANGE),
        )
    translation = draw(3, "root_translation")

    # experts see the same seam joints as the body: neck and wrists agree in truth
    if dims.face_joints >= 2:
        others[0] = body_pose[2]
    hands["left"][0][0] = body_pose[5]
    hands["right"][0][0] = body_pose[8]

    truth = FullBodyParams(
        body=BodyParams(body_pose, body_shape),
        face=FaceParams(jaw, others, expression),
        left_hand=HandParams(hands["left"][0], hands["left"][1], "left"),
        right_hand=HandParams(hands["right"][0], hands["right"][1], "right"),
        root_translation=translation,
    )
    if camera is None:
        camera = Camera(focal_length=1000.0, principal_point=(512.0, 512.0), subject_depth=3.0)
    return Scene(subject_id=subject_id or f"scene-{seed:016x}", truth=truth, camera=camera, seed=int(seed))


def generate_scenes(master_seed, count, dims, pose_prior_scale, camera=None):
    return [
        generate_scene(s, dims, pose_prior_scale, camera, subject_id=f"s{i:06d}")
        for i, s in enumerate(scene_seeds(master_seed, count))
    ]


# ============ DETECTOR ============
def exact_keypoints(params: FullBodyParams, tpl: SkeletonTemplate, camera: Camera):
    """FK + projection of the detector keypoints, pixels (K, 2)."""
    vec = tpl.layout().to_vector(params)
    joints, markers, _ = fk_batch(vec[None], tpl)
    return project(keypoints_from(joints[0], markers[0], tpl), camera)


def detect_keypoints(scene: Scene, tpl: SkeletonTemplate, noise: NoiseProfile, seed=None):
    """Simulated OpenPose: exact projections plus jitter, dropout and confidences."""
    rng = np.random.default_rng(derive_seed(scene.seed, STREAM_DETECT) if seed is None else seed)
    exact = exact_keypoints(scene.truth, tpl, scene.camera)
    K = len(exact)
    sigma = noise.keypoint_jitter
    jitter = rng.normal(0.0, 1.0, size=(K, 2)) * sigma
    magnitude = np.linalg.norm(jitter, axis=1)
    confidence = np.clip(1.0 - magnitude / (4.0 * sigma + CONFIDENCE_EPS), 0.0, 1.0)
    dropped = rng.random(K) < noise.keypoint_dropout
    confidence[dropped] = 0.0
    return KeypointObservation(positions=exact + jitter, confidence=confidence, parts=tuple(tpl.keypoint_part))


# ============ EXPERTS ============
class ExpertFeatureMaps:
    """Fixed random nonlinear maps from a part's true parameters to its expert feature."""

    def __init__(self, dims: ModelDims, feature_dims: FeatureDims, seed=0, gain=2.0):
        rng = np.random.default_rng(seed)
        layout_sizes = {
            "body": dims.body_joints * 3 + dims.body_shape,
            "face": 3 + (dims.face_joints - 1) * 3 + dims.expression_dims,
            "hand": dims.hand_joints * 3 + dims.hand_shape,
        }
        self.feature_dims = feature_dims
        self.maps = {}
        for key, n_in in layout_sizes.items():
            n_out = feature_dims.for_part(key)
            W = rng.normal(size=(n_out, n_in)) * gain / np.sqrt(n_in)
            b = rng.normal(size=n_out) * 0.1
            self.maps[key] = (W, b)

    def __call__(self, part, part_vector):
        key = "hand" if part in ("left_hand", "right_hand") else part
        W, b = self.maps[key]
        return np.tanh(W @ part_vector + b)


def part_params(params: FullBodyParams, part):
    if part == "body":
        return params.body
    if part == "face":
        return params.face
    if part == "left_hand":
        return params.left_hand
    if part == "right_hand":
        return params.right_hand
    raise InvalidArgumentError(f"unknown part '{part}'")


def flatten_part(p):
    if isinstance(p, BodyParams):
        return np.concatenate([p.pose.ravel(), p.shape])
    if isinstance(p, FaceParams):
        return np.concatenate([p.jaw_pose, p.other_poses.ravel(), p.expression])
    return np.concatenate([p.pose.ravel(), p.shape])


def _rebuild_part(template, vec):
    if isinstance(template, BodyParams):
        n = template.pose.size
        return BodyParams(vec[:n].reshape(template.pose.shape), vec[n:].copy())
    if isinstance(template, FaceParams):
        n_other = template.other_poses.size
        return FaceParams(vec[:3].copy(), vec[3:3 + n_other].reshape(template.other_poses.shape),
                          vec[3 + n_other:].copy())
    n = template.pose.size
    return HandParams(vec[:n].reshape(template.pose.shape), vec[n:].copy(), template.side)


def _pose_size(template):
    if isinstance(template, FaceParams):
        return 3 + template.other_poses.size
    return template.pose.size


def run_expert(part, scene: Scene, noise: NoiseProfile, feature_maps: ExpertFeatureMaps, seed=None):
    """Simulated part expert: noisy part parameters plus a pseudo feature."""
    if part not in PARTS:
        raise InvalidArgumentError(f"unknown part tag '{part}' (expected one of {', '.join(PARTS)})")
    rng = np.random.default_rng(derive_seed(scene.seed, STREAM_EXPERT[part]) if seed is None else seed)
    truth_part = part_params(scene.truth, part)
    truth_vec = flatten_part(truth_part)
    n_pose = _pose_size(truth_part)

    vec = truth_vec + rng.normal(0.0, 1.0, size=truth_vec.shape) * noise.param_noise(part)
    if rng.random() < noise.gross_error_prob:
        vec[:n_pose] += rng.choice([-1.0, 1.0], size=n_pose) * noise.gross_error_magnitude

    valid = True
    if rng.random() < noise.invalid_prob:
        valid = False
        k = int(rng.integers(len(vec)))
        if rng.random() < 0.5:
            vec[k] = np.nan
        else:
            vec[k] = 50.0 * rng.choice([-1.0, 1.0])

    clean = feature_maps(part, truth_vec)
    feature = clean + rng.normal(0.0, 1.0, size=clean.shape) * noise.feature_noise
    translation = None
    if part == "body":
        translation = scene.truth.root_translation + rng.normal(0.0, 1.0, size=3) * noise.body_param_noise * 0.1
    return PartPrediction(part=part, params=_rebuild_part(truth_part, vec), feature=feature, valid=valid,
                          translation=translation)


def run_experts(scene, noise, feature_maps):
    return {part: run_expert(part, scene, noise, feature_maps) for part in PARTS}


@dataclass(frozen=True)
class DatasetEntry:
    scene: Scene
    observation: KeypointObservation
    predictions: dict        # part -> PartPrediction


def simulate(scene, tpl, noise, feature_maps):
    """Detector plus the four expert runs for one scene."""
    return DatasetEntry(
        scene=scene,
        observation=detect_keypoints(scene, tpl, noise),
        predictions=run_experts(scene, noise, feature_maps),
    )


def simulate_dataset(master_seed, count, tpl, noise, feature_maps, pose_prior_scale, camera=None, threads=1):
    """Scenes plus detector and expert outputs; each scene owns a split of the master seed."""
    scenes = generate_scenes(master_seed, count, tpl.dims, pose_prior_scale, camera)
    logger.info("simulating %d scenes (master seed %d)", count, master_seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: simulate(s, tpl, noise, feature_maps), scenes))
    return [simulate(scene, tpl, noise, feature_maps) for scene in scenes]
