# body_model.py
"""Layered full-body model: a body skeleton with face and hand subtrees and skinned markers.

The full parameter vector splits into body / face / left hand / right hand
parts and merges back without loss. Markers play the role of mesh vertices.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigurationError, DataIOError, InvalidArgumentError, SchemaVersionError
from geometry import rodrigues_batch, rodrigues_jacobian_batch

logger = logging.getLogger(__name__)

TEMPLATE_SCHEMA_VERSION = 1
PARTS = ("body", "face", "left_hand", "right_hand")
KEYPOINT_TAGS = ("body", "hand", "face")
MIN_BODY_JOINTS = 9

# core body joints: (name, parent, rest offset in meters)
CORE_BODY = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.25, 0.0)),
    ("neck", 1, (0.0, 0.25, 0.0)),
    ("left_shoulder", 1, (0.17, 0.22, 0.0)),
    ("left_elbow", 3, (0.28, 0.0, 0.0)),
    ("left_wrist", 4, (0.25, 0.0, 0.0)),
    ("right_shoulder", 1, (-0.17, 0.22, 0.0)),
    ("right_elbow", 6, (-0.28, 0.0, 0.0)),
    ("right_wrist", 7, (-0.25, 0.0, 0.0)),
]
NECK, LEFT_WRIST, RIGHT_WRIST = 2, 5, 8
# other accepted spellings of the dims presets
PRESET_ALIASES = {"paper": "full"}
LEG_LINKS = [(0.1, -0.08, 0.0), (0.0, -0.42, 0.0), (0.0, -0.40, 0.0), (0.0, -0.05, 0.12)]
TOE_LINK = (0.0, 0.0, 0.04)


# ============ DIMENSIONS ============
class PartCounts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    body: int = Field(ge=1)
    face: int = Field(ge=1)
    hand: int = Field(ge=1)


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    body_joints: int = Field(ge=1)
    body_shape: int = Field(ge=1)
    face_joints: int = Field(ge=1)
    expression_dims: int = Field(ge=1)
    hand_joints: int = Field(ge=1)
    hand_shape: int = Field(ge=1)
    markers_per_part: PartCounts
    keypoints_per_part: PartCounts

    @classmethod
    def toy(cls):
        return cls(
            body_joints=12, body_shape=4, face_joints=2, expression_dims=6,
            hand_joints=5, hand_shape=2,
            markers_per_part=PartCounts(body=20, face=12, hand=8),
            keypoints_per_part=PartCounts(body=25, face=12, hand=12),
        )

    @classmethod
    def full(cls):
        return cls(
            body_joints=24, body_shape=10, face_joints=4, expression_dims=100,
            hand_joints=21, hand_shape=10,
            markers_per_part=PartCounts(body=60, face=80, hand=24),
            keypoints_per_part=PartCounts(body=25, face=70, hand=21),
        )

    @classmethod
    def preset(cls, name):
        name = PRESET_ALIASES.get(name, name)
        if name == "toy":
            return cls.toy()
        if name == "full":
            return cls.full()
        raise ConfigurationError(f"unknown dims preset '{name}'")


# ============ PARAMETERS ============
@dataclass(frozen=True)
class BodyParams:
    pose: np.ndarray   # (body_joints, 3), joint 0 is the global root rotation
    shape: np.ndarray  # (body_shape,)


@dataclass(frozen=True)
class FaceParams:
    jaw_pose: np.ndarray     # (3,)
    other_poses: np.ndarray  # (face_joints - 1, 3): neck first, then eyes
    expression: np.ndarray   # (expression_dims,)


@dataclass(frozen=True)
class HandParams:
    pose: np.ndarray   # (hand_joints, 3): wrist first, then finger joints
    shape: np.ndarray  # (hand_shape,)
    side: str = "left"


@dataclass(frozen=True)
class FullBodyParams:
    body: BodyParams
    face: FaceParams
    left_hand: HandParams
    right_hand: HandParams
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros(cls, dims: ModelDims):
        return cls(
            body=BodyParams(np.zeros((dims.body_joints, 3)), np.zeros(dims.body_shape)),
            face=FaceParams(np.zeros(3), np.zeros((dims.face_joints - 1, 3)), np.zeros(dims.expression_dims)),
            left_hand=HandParams(np.zeros((dims.hand_joints, 3)), np.zeros(dims.hand_shape), "left"),
            right_hand=HandParams(np.zeros((dims.hand_joints, 3)), np.zeros(dims.hand_shape), "right"),
            root_translation=np.zeros(3),
        )


def split(full: FullBodyParams):
    """Partition full-body parameters into the four part parameter sets."""
    return full.body, full.face, full.left_hand, full.right_hand


def merge(body, face, lhand, rhand, root_translation=None):
    """Integrate part parameters into one full-body parameter set."""
    if lhand.side == rhand.side:
        raise InvalidArgumentError(f"both hands have side '{lhand.side}'")
    if lhand.side != "left":
        lhand, rhand = rhand, lhand
    if root_translation is None:
        root_translation = np.zeros(3)
    return FullBodyParams(body, face, lhand, rhand, np.asarray(root_translation, dtype=float))


class ParamLayout:
    """Slices of the flat parameter vector for one ModelDims."""

    def __init__(self, dims: ModelDims):
        self.dims = dims
        sizes = [
            ("body_pose", dims.body_joints * 3),
            ("body_shape", dims.body_shape),
            ("face_jaw", 3),
            ("face_other", (dims.face_joints - 1) * 3),
            ("expression", dims.expression_dims),
            ("left_pose", dims.hand_joints * 3),
            ("left_shape", dims.hand_shape),
            ("right_pose", dims.hand_joints * 3),
            ("right_shape", dims.hand_shape),
            ("root_translation", 3),
        ]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def __getitem__(self, name):
        return self.slices[name]

    def check(self, params: FullBodyParams):
        d = self.dims
        expected = [
            ("body.pose", params.body.pose.shape, (d.body_joints, 3)),
            ("body.shape", params.body.shape.shape, (d.body_shape,)),
            ("face.jaw_pose", params.face.jaw_pose.shape, (3,)),
            ("face.other_poses", params.face.other_poses.shape, (d.face_joints - 1, 3)),
            ("face.expression", params.face.expression.shape, (d.expression_dims,)),
            ("left_hand.pose", params.left_hand.pose.shape, (d.hand_joints, 3)),
            ("left_hand.shape", params.left_hand.shape.shape, (d.hand_shape,)),
            ("right_hand.pose", params.right_hand.pose.shape, (d.hand_joints, 3)),
            ("right_hand.shape", params.right_hand.shape.shape, (d.hand_shape,)),
            ("root_translation", np.shape(params.root_translation), (3,)),
        ]
        for name, got, want in expected:
            if tuple(got) != want:
                raise ConfigurationError(f"{name} has shape {tuple(got)}, template expects {want}")

    def to_vector(self, params: FullBodyParams):
        self.check(params)
        vec = np.empty(self.size)
        s = self.slices
        vec[s["body_pose"]] = params.body.pose.ravel()
        vec[s["body_shape"]] = params.body.shape
        vec[s["face_jaw"]] = params.face.jaw_pose
        vec[s["face_other"]] = params.face.other_poses.ravel()
        vec[s["expression"]] = params.face.expression
        vec[s["left_pose"]] = params.left_hand.pose.ravel()
        vec[s["left_shape"]] = params.left_hand.shape
        vec[s["right_pose"]] = params.right_hand.pose.ravel()
        vec[s["right_shape"]] = params.right_hand.shape
        vec[s["root_translation"]] = params.root_translation
        return vec

    def from_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ConfigurationError(f"parameter vector has shape {vec.shape}, expected ({self.size},)")
        s, d = self.slices, self.dims
        return FullBodyParams(
            body=BodyParams(vec[s["body_pose"]].reshape(d.body_joints, 3).copy(), vec[s["body_shape"]].copy()),
            face=FaceParams(
                vec[s["face_jaw"]].copy(),
                vec[s["face_other"]].reshape(d.face_joints - 1, 3).copy(),
                vec[s["expression"]].copy(),
            ),
            left_hand=HandParams(vec[s["left_pose"]].reshape(d.hand_joints, 3).copy(), vec[s["left_shape"]].copy(), "left"),
            right_hand=HandParams(vec[s["right_pose"]].reshape(d.hand_joints, 3).copy(), vec[s["right_shape"]].copy(), "right"),
            root_translation=vec[s["root_translation"]].copy(),
        )

    def part_vector(self, vec, part):
        """Parameters a part expert is responsible for, as one flat vector."""
        s = self.slices
        if part == "body":
            keys = ("body_pose", "body_shape")
        elif part == "face":
            keys = ("face_jaw", "face_other", "expression")
        elif part == "left_hand":
            keys = ("left_pose", "left_shape")
        elif part == "right_hand":
            keys = ("right_pose", "right_shape")
        else:
            raise InvalidArgumentError(f"unknown part '{part}'")
        return np.concatenate([vec[..., s[k]] for k in keys], axis=-1)


# ============ TEMPLATE ============
@dataclass(frozen=True)
class SkeletonTemplate:
    dims: ModelDims
    joint_names: list
    parents: np.ndarray          # (N,)
    joint_part: list             # (N,) part per joint
    rest_offsets: np.ndarray     # (N, 3)
    shape_basis: np.ndarray      # (N, 3, body_shape)
    hand_shape_basis: np.ndarray  # (N, 3, hand_shape), nonzero on hand joints only
    marker_joints: np.ndarray    # (M, 2)
    marker_weights: np.ndarray   # (M, 2)
    marker_offsets: np.ndarray   # (M, 3) rest offset from the first attached joint
    marker_part: list            # (M,)
    expression_basis: np.ndarray  # (face markers, 3, expression_dims)
    keypoint_kind: np.ndarray    # (K,) 0 = joint, 1 = marker
    keypoint_index: np.ndarray   # (K,)
    keypoint_part: list          # (K,) body | hand | face
    seams: dict

    @property
    def num_joints(self):
        return len(self.parents)

    @property
    def num_markers(self):
        return len(self.marker_part)

    @property
    def num_keypoints(self):
        return len(self.keypoint_part)

    @cached_property
    def _layout(self):
        return ParamLayout(self.dims)

    def layout(self):
        return self._layout

    def marker_mask(self, part):
        return np.array([p == part for p in self.marker_part])

    def joint_mask(self, part):
        return np.array([p == part for p in self.joint_part])

    def face_marker_index(self):
        return np.flatnonzero(self.marker_mask("face"))

    @cached_property
    def pose_index(self):
        """(N, 3) positions in the flat parameter vector driving each joint's rotation.

        Seam joints (neck, wrists) read the body pose; the face expert's neck and
        the hand experts' wrist values do not drive the skeleton.
        """
        lay = self.layout()
        idx = np.zeros((self.num_joints, 3), dtype=int)
        face_k = 0
        hand_k = {"left_hand": 0, "right_hand": 0}
        for i, part in enumerate(self.joint_part):
            if part == "body":
                base = lay["body_pose"].start + 3 * i
            elif part == "face":
                if face_k == 0:
                    base = lay["face_jaw"].start
                else:
                    base = lay["face_other"].start + 3 * face_k  # skips the neck seam
                face_k += 1
            else:
                hand_k[part] += 1
                key = "left_pose" if part == "left_hand" else "right_pose"
                base = lay[key].start + 3 * hand_k[part]  # skips the wrist seam
            idx[i] = base + np.arange(3)
        return idx

    # --- JSON ---
    def to_dict(self):
        return {
            "schema_version": TEMPLATE_SCHEMA_VERSION,
            "dims": self.dims.model_dump(),
            "joint_names": list(self.joint_names),
            "parents": self.parents.tolist(),
            "joint_part": list(self.joint_part),
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "hand_shape_basis": self.hand_shape_basis.tolist(),
            "marker_joints": self.marker_joints.tolist(),
            "marker_weights": self.marker_weights.tolist(),
            "marker_offsets": self.marker_offsets.tolist(),
            "marker_part": list(self.marker_part),
            "expression_basis": self.expression_basis.tolist(),
            "keypoint_kind": self.keypoint_kind.tolist(),
            "keypoint_index": self.keypoint_index.tolist(),
            "keypoint_part": list(self.keypoint_part),
            "seams": dict(self.seams),
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("schema_version")
        if version != TEMPLATE_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"template schema_version {version} is not supported; "
                f"regenerate the template with this version (expects {TEMPLATE_SCHEMA_VERSION})"
            )
        dims = ModelDims.model_validate(doc["dims"])
        return cls(
            dims=dims,
            joint_names=list(doc["joint_names"]),
            parents=np.asarray(doc["parents"], dtype=int),
            joint_part=list(doc["joint_part"]),
            rest_offsets=np.asarray(doc["rest_offsets"], dtype=float),
            shape_basis=np.asarray(doc["shape_basis"], dtype=float).reshape(-1, 3, dims.body_shape),
            hand_shape_basis=np.asarray(doc["hand_shape_basis"], dtype=float).reshape(-1, 3, dims.hand_shape),
            marker_joints=np.asarray(doc["marker_joints"], dtype=int),
            marker_weights=np.asarray(doc["marker_weights"], dtype=float),
            marker_offsets=np.asarray(doc["marker_offsets"], dtype=float),
            marker_part=list(doc["marker_part"]),
            expression_basis=np.asarray(doc["expression_basis"], dtype=float).reshape(-1, 3, dims.expression_dims),
            keypoint_kind=np.asarray(doc["keypoint_kind"], dtype=int),
            keypoint_index=np.asarray(doc["keypoint_index"], dtype=int),
            keypoint_part=list(doc["keypoint_part"]),
            seams={k: int(v) for k, v in doc["seams"].items()},
        )

    def save(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"cannot write template ({e.strerror})", path) from e

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise DataIOError(f"cannot read template ({e.strerror})", path) from e
        return cls.from_dict(doc)


def _bone_marker(rng, parent, child, child_offset, radius):
    """Marker on the bone parent->child: (joints, weights, offset from parent)."""
    alpha = rng.uniform(0.2, 0.8)
    radial = rng.normal(size=3)
    radial *= radius / max(np.linalg.norm(radial), 1e-12)
    return (parent, child), (1.0 - alpha, alpha), alpha * np.asarray(child_offset) + radial


def build_template(dims: ModelDims, seed=0):
    """Build the skeleton, bases, markers and keypoint layout for one ModelDims."""
    if dims.body_joints < MIN_BODY_JOINTS:
        raise ConfigurationError(f"body_joints must be >= {MIN_BODY_JOINTS} (pelvis, spine, neck, two arms)")
    rng = np.random.default_rng(seed)

    names, parents, offsets, part = [], [], [], []

    def add(name, parent, offset, p):
        names.append(name)
        parents.append(parent)
        offsets.append(offset)
        part.append(p)
        return len(names) - 1

    for name, parent, offset in CORE_BODY:
        add(name, parent, offset, "body")
    chain_tip = {"left": 0, "right": 0}
    chain_len = {"left": 0, "right": 0}
    for k in range(dims.body_joints - len(CORE_BODY)):
        side = "left" if k % 2 == 0 else "right"
        n = chain_len[side]
        link = LEG_LINKS[n] if n < len(LEG_LINKS) else TOE_LINK
        sign = 1.0 if side == "left" else -1.0
        offset = (sign * link[0], link[1], link[2])
        chain_tip[side] = add(f"{side}_leg_{n}", chain_tip[side], offset, "body")
        chain_len[side] += 1

    # face subtree hangs off the neck: jaw, then eyes
    add("jaw", NECK, (0.0, 0.12, 0.04), "face")
    for k in range(dims.face_joints - 2):
        sign = 1.0 if k % 2 == 0 else -1.0
        add(f"eye_{k}", NECK, (sign * 0.03 * (1 + k // 2), 0.2, 0.08), "face")

    # hand subtrees hang off the wrists: five finger chains
    hand_local = {}
    for side, wrist, sign in (("left", LEFT_WRIST, 1.0), ("right", RIGHT_WRIST, -1.0)):
        local = []
        tips = {}
        for k in range(dims.hand_joints - 1):
            finger, segment = k % 5, k // 5
            if segment == 0:
                parent, offset = wrist, (sign * 0.08, 0.0, (finger - 2) * 0.02)
            else:
                parent, offset = tips[finger], (sign * 0.03, 0.0, 0.0)
            tips[finger] = add(f"{side}_finger{finger}_{segment}", parent, offset, f"{side}_hand")
            local.append(tips[finger])
        hand_local[side] = local

    parents = np.asarray(parents, dtype=int)
    offsets = np.asarray(offsets, dtype=float)
    N = len(parents)

    shape_basis = np.zeros((N, 3, dims.body_shape))
    body_or_face = np.array([p in ("body", "face") for p in part])
    shape_basis[body_or_face] = 0.02 * rng.normal(size=(int(body_or_face.sum()), 3, dims.body_shape))
    shape_basis[0] = 0.0
    hand_shape_basis = np.zeros((N, 3, dims.hand_shape))
    left_basis = 0.005 * rng.normal(size=(len(hand_local["left"]), 3, dims.hand_shape))
    hand_shape_basis[hand_local["left"]] = left_basis
    hand_shape_basis[hand_local["right"]] = left_basis * np.array([-1.0, 1.0, 1.0])[None, :, None]

    # markers: body, face, left hand, right hand
    m_joints, m_weights, m_offsets, m_part = [], [], [], []
    for i in range(dims.markers_per_part.body):
        child = 1 + i % (dims.body_joints - 1)
        j, w, d = _bone_marker(rng, parents[child], child, offsets[child], 0.04)
        m_joints.append(j)
        m_weights.append(w)
        m_offsets.append(d)
        m_part.append("body")
    face_local = [i for i, p in enumerate(part) if p == "face"]
    for i in range(dims.markers_per_part.face):
        child = face_local[i % len(face_local)]
        alpha = rng.uniform(0.2, 0.8)
        direction = rng.normal(size=3)
        direction[2] = abs(direction[2])
        direction /= max(np.linalg.norm(direction), 1e-12)
        m_joints.append((NECK, child))
        m_weights.append((1.0 - alpha, alpha))
        m_offsets.append(np.array([0.0, 0.12, 0.02]) + 0.09 * direction)
        m_part.append("face")
    for side, wrist in (("left", LEFT_WRIST), ("right", RIGHT_WRIST)):
        local = hand_local[side]
        for i in range(dims.markers_per_part.hand):
            if local:
                child = local[i % len(local)]
                j, w, d = _bone_marker(rng, parents[child], child, offsets[child], 0.008)
            else:
                j, w, d = (wrist, wrist), (1.0, 0.0), 0.01 * rng.normal(size=3)
            m_joints.append(j)
            m_weights.append(w)
            m_offsets.append(d)
            m_part.append(f"{side}_hand")
    n_face = dims.markers_per_part.face
    expression_basis = 0.003 * rng.normal(size=(n_face, 3, dims.expression_dims))

    # keypoint layout, OpenPose-like: body, left hand, right hand, face
    kind, index, kp_part = [], [], []

    def take(sources, count, tag):
        if count > len(sources):
            raise ConfigurationError(f"{count} {tag} keypoints requested but only {len(sources)} points exist")
        for k, i in sources[:count]:
            kind.append(k)
            index.append(i)
            kp_part.append(tag)

    body_markers = [i for i, p in enumerate(m_part) if p == "body"]
    take([(0, j) for j in range(dims.body_joints)] + [(1, m) for m in body_markers],
         dims.keypoints_per_part.body, "body")
    for side, wrist in (("left", LEFT_WRIST), ("right", RIGHT_WRIST)):
        markers = [i for i, p in enumerate(m_part) if p == f"{side}_hand"]
        take([(0, wrist)] + [(0, j) for j in hand_local[side]] + [(1, m) for m in markers],
             dims.keypoints_per_part.hand, "hand")
    face_markers = [i for i, p in enumerate(m_part) if p == "face"]
    take([(0, j) for j in face_local] + [(1, m) for m in face_markers], dims.keypoints_per_part.face, "face")

    tpl = SkeletonTemplate(
        dims=dims,
        joint_names=names,
        parents=parents,
        joint_part=part,
        rest_offsets=offsets,
        shape_basis=shape_basis,
        hand_shape_basis=hand_shape_basis,
        marker_joints=np.asarray(m_joints, dtype=int),
        marker_weights=np.asarray(m_weights, dtype=float),
        marker_offsets=np.asarray(m_offsets, dtype=float),
        marker_part=m_part,
        expression_basis=expression_basis,
        keypoint_kind=np.asarray(kind, dtype=int),
        keypoint_index=np.asarray(index, dtype=int),
        keypoint_part=kp_part,
        seams={"neck": NECK, "left_wrist": LEFT_WRIST, "right_wrist": RIGHT_WRIST},
    )
    logger.debug("template: %d joints, %d markers, %d keypoints", N, tpl.num_markers, tpl.num_keypoints)
    return tpl


# ============ FORWARD KINEMATICS ============
@dataclass
class FKCache:
    params: np.ndarray
    rotations: np.ndarray  # (B, N, 3, 3) local
    global_rot: np.ndarray  # (B, N, 3, 3)
    offsets: np.ndarray    # (B, N, 3) shape-adjusted
    rest: np.ndarray       # (B, N, 3) shape-adjusted rest joint positions
    local_vec: np.ndarray  # (B, M, 2, 3) marker vectors in rest space


def _hand_masks(tpl):
    return tpl.joint_mask("left_hand").astype(float), tpl.joint_mask("right_hand").astype(float)


def fk_batch(P, tpl: SkeletonTemplate):
    """Iterative forward kinematics over a batch of flat parameter vectors (B, P).

    Returns joints (B, N, 3), markers (B, M, 3) and the cache for fk_backward.
    """
    P = np.asarray(P, dtype=float)
    lay = tpl.layout()
    if P.ndim != 2 or P.shape[1] != lay.size:
        raise ConfigurationError(f"parameter batch has shape {P.shape}, template expects (B, {lay.size})")
    B, N = P.shape[0], tpl.num_joints

    aa = P[:, tpl.pose_index]
    R = rodrigues_batch(aa)
    left, right = _hand_masks(tpl)
    offsets = (
        tpl.rest_offsets[None]
        + np.einsum("njs,bs->bnj", tpl.shape_basis, P[:, lay["body_shape"]])
        + np.einsum("njs,bs->bnj", tpl.hand_shape_basis * left[:, None, None], P[:, lay["left_shape"]])
        + np.einsum("njs,bs->bnj", tpl.hand_shape_basis * right[:, None, None], P[:, lay["right_shape"]])
    )
    trans = P[:, lay["root_translation"]]

    G = np.empty((B, N, 3, 3))
    joints = np.empty((B, N, 3))
    rest = np.empty((B, N, 3))
    for i in range(N):
        par = tpl.parents[i]
        if par < 0:
            G[:, i] = R[:, i]
            joints[:, i] = trans + offsets[:, i]
            rest[:, i] = offsets[:, i]
        else:
            G[:, i] = G[:, par] @ R[:, i]
            joints[:, i] = joints[:, par] + np.einsum("bij,bj->bi", G[:, par], offsets[:, i])
            rest[:, i] = rest[:, par] + offsets[:, i]

    J, W = tpl.marker_joints, tpl.marker_weights
    first = J[:, 0]
    base = rest[:, first] + tpl.marker_offsets[None]  # (B, M, 3)
    face_idx = tpl.face_marker_index()
    if len(face_idx):
        base[:, face_idx] += np.einsum("fje,be->bfj", tpl.expression_basis, P[:, lay["expression"]])
    local_vec = base[:, :, None, :] - rest[:, J]  # (B, M, 2, 3)
    moved = np.einsum("bmkij,bmkj->bmki", G[:, J], local_vec) + joints[:, J]
    markers = np.einsum("mk,bmki->bmi", W, moved)

    cache = FKCache(P, R, G, offsets, rest, local_vec)
    return joints, markers, cache


def fk_backward(cache: FKCache, tpl: SkeletonTemplate, g_joints, g_markers):
    """Reverse-mode pass of fk_batch: gradients w.r.t. the flat parameter batch."""
    P, R, G, offsets = cache.params, cache.rotations, cache.global_rot, cache.offsets
    lay = tpl.layout()
    B, N = P.shape[0], tpl.num_joints
    all_b = slice(None)

    gp = np.array(g_joints, dtype=float, copy=True)
    gG = np.zeros((B, N, 3, 3))
    grest = np.zeros((B, N, 3))
    gP = np.zeros_like(P)

    # markers
    J, W = tpl.marker_joints, tpl.marker_weights
    wg = W[None, :, :, None] * np.asarray(g_markers)[:, :, None, :]  # (B, M, 2, 3)
    np.add.at(gp, (all_b, J), wg)
    np.add.at(gG, (all_b, J), wg[..., :, None] * cache.local_vec[..., None, :])
    gu = np.einsum("bmkji,bmkj->bmki", G[:, J], wg)
    np.add.at(grest, (all_b, J[:, 0]), gu.sum(axis=2))
    np.add.at(grest, (all_b, J), -gu)
    face_idx = tpl.face_marker_index()
    if len(face_idx):
        gP[:, lay["expression"]] += np.einsum("fje,bfj->be", tpl.expression_basis, gu[:, face_idx].sum(axis=2))

    # joints, leaves first
    gR = np.zeros((B, N, 3, 3))
    go = np.zeros((B, N, 3))
    gtrans = np.zeros((B, 3))
    for i in reversed(range(N)):
        par = tpl.parents[i]
        if par < 0:
            gR[:, i] = gG[:, i]
            gtrans += gp[:, i]
            go[:, i] += gp[:, i] + grest[:, i]
            continue
        Gp = G[:, par]
        gp[:, par] += gp[:, i]
        gG[:, par] += gp[:, i][:, :, None] * offsets[:, i][:, None, :]
        gG[:, par] += gG[:, i] @ np.swapaxes(R[:, i], -1, -2)
        gR[:, i] = np.swapaxes(Gp, -1, -2) @ gG[:, i]
        go[:, i] += np.einsum("bji,bj->bi", Gp, gp[:, i]) + grest[:, i]
        grest[:, par] += grest[:, i]

    pose_index = tpl.pose_index
    dR = rodrigues_jacobian_batch(P[:, pose_index], R)
    g_aa = np.einsum("bnij,bnkij->bnk", gR, dR)
    np.add.at(gP, (all_b, pose_index), g_aa)

    left, right = _hand_masks(tpl)
    gP[:, lay["body_shape"]] += np.einsum("njs,bnj->bs", tpl.shape_basis, go)
    gP[:, lay["left_shape"]] += np.einsum("njs,bnj->bs", tpl.hand_shape_basis * left[:, None, None], go)
    gP[:, lay["right_shape"]] += np.einsum("njs,bnj->bs", tpl.hand_shape_basis * right[:, None, None], go)
    gP[:, lay["root_translation"]] += gtrans
    return gP


def keypoints_from(joints, markers, tpl: SkeletonTemplate):
    """Gather the detector keypoints (…, K, 3) from joints and markers."""
    is_marker = tpl.keypoint_kind == 1
    out = np.empty(joints.shape[:-2] + (tpl.num_keypoints, 3))
    out[..., ~is_marker, :] = joints[..., tpl.keypoint_index[~is_marker], :]
    out[..., is_marker, :] = markers[..., tpl.keypoint_index[is_marker], :]
    return out


def keypoints_backward(g_kp, tpl: SkeletonTemplate):
    B = g_kp.shape[0]
    g_joints = np.zeros((B, tpl.num_joints, 3))
    g_markers = np.zeros((B, tpl.num_markers, 3))
    is_marker = tpl.keypoint_kind == 1
    np.add.at(g_joints, (slice(None), tpl.keypoint_index[~is_marker]), g_kp[:, ~is_marker])
    np.add.at(g_markers, (slice(None), tpl.keypoint_index[is_marker]), g_kp[:, is_marker])
    return g_joints, g_markers


def forward_kinematics(params: FullBodyParams, tpl: SkeletonTemplate):
    """Joint and marker positions for one parameter set."""
    vec = tpl.layout().to_vector(params)
    joints, markers, _ = fk_batch(vec[None], tpl)
    return joints[0], markers[0]
