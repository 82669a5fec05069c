# learn.py
"""Keypoint-to-parameter regressor with hand-written backpropagation, the
distillation losses, Adam and a finite-difference gradient oracle.

All batch losses are per-sample sums averaged over the batch. Gradients are
returned for the flat parameter vector of a ModelState.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from body_model import KEYPOINT_TAGS, PARTS, SkeletonTemplate, fk_batch, fk_backward, keypoints_backward, keypoints_from
from errors import ConfigurationError, DegenerateInputError, InvalidArgumentError, NumericalError
from geometry import project_batch, project_batch_backward
from synth import FeatureDims

logger = logging.getLogger(__name__)

AMPLIFICATION = float(np.exp(5.0))

TERMS_BY_PART = {
    "body": ("joint2d_body", "pose", "feature_body"),
    "face": ("joint2d_face", "expression", "jaw_pose", "feature_face"),
    "hand": ("joint2d_hand", "hand_pose", "feature_hand"),
}
TERM_NAMES = tuple(name for names in TERMS_BY_PART.values() for name in names)


# ============ CONFIG ============
class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    joint2d_body: float = Field(default=1.0, ge=0)
    pose: float = Field(default=1.0, ge=0)
    feature_body: float = Field(default=1.0, ge=0)
    joint2d_face: float = Field(default=1.0, ge=0)
    expression: float = Field(default=1.0, ge=0)
    jaw_pose: float = Field(default=1.0, ge=0)
    feature_face: float = Field(default=1.0, ge=0)
    joint2d_hand: float = Field(default=1.0, ge=0)
    hand_pose: float = Field(default=1.0, ge=0)
    feature_hand: float = Field(default=1.0, ge=0)

    def pseudo_free(self):
        """Weights of the 2D-keypoint-only baseline: every pseudo-label term off."""
        return self.model_copy(update={name: 0.0 for name in TERM_NAMES if not name.startswith("joint2d")})


class LossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    amplification: float = Field(default=AMPLIFICATION, gt=0)
    temperature: float = Field(default=1.0, gt=0)
    feature_dims: FeatureDims = FeatureDims()
    weights: LossWeights = LossWeights()
    # visibility v_j of the 2D loss: confidence strictly above the part threshold
    body_visibility: float = Field(default=0.1, ge=0, lt=1)
    hand_visibility: float = Field(default=0.2, ge=0, lt=1)
    face_visibility: float = Field(default=0.4, ge=0, lt=1)
    # "subject_plane" rescales pixel residuals by depth / focal so they sit next to radians
    joint2d_units: Literal["pixel", "subject_plane"] = "subject_plane"

    def visibility_thresholds(self, parts):
        table = {"body": self.body_visibility, "hand": self.hand_visibility, "face": self.face_visibility}
        return np.array([table[tag] for tag in parts])


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: tuple[int, ...] = (64, 64)
    student_features: FeatureDims = FeatureDims(body=16, face=8, hand=8)
    head_scale: float = Field(default=0.1, ge=0)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError(f"hidden widths must be >= 1, got {v}")
        return v


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=1e-5, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=30, ge=0)
    decay_epoch: int = Field(default=20, ge=0)
    decay_factor: float = Field(default=0.1, gt=0)


# ============ MODEL STATE ============
FEATURE_PARTS = PARTS


def adapter_key(part):
    return "hand" if part in ("left_hand", "right_hand") else part


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple
    param_dim: int
    student_features: dict   # body/face/hand
    expert_features: dict    # body/face/hand

    @classmethod
    def build(cls, tpl: SkeletonTemplate, network: NetworkConfig, feature_dims: FeatureDims):
        return cls(
            input_dim=3 * tpl.num_keypoints,
            hidden=tuple(network.hidden),
            param_dim=tpl.layout().size,
            student_features=network.student_features.model_dump(),
            expert_features=feature_dims.model_dump(),
        )

    @property
    def trunk_width(self):
        return self.hidden[-1] if self.hidden else self.input_dim

    def entries(self):
        out = []
        width = self.input_dim
        for i, n in enumerate(self.hidden):
            out += [(f"hidden{i}.weight", (n, width)), (f"hidden{i}.bias", (n,))]
            width = n
        out += [("param_head.weight", (self.param_dim, width)), ("param_head.bias", (self.param_dim,))]
        for key in ("body", "face", "hand"):
            n = self.student_features[key] * (2 if key == "hand" else 1)
            out += [(f"feature_head.{key}.weight", (n, width)), (f"feature_head.{key}.bias", (n,))]
        for key in ("body", "face", "hand"):
            n_in, n_out = self.student_features[key], self.expert_features[key]
            out += [(f"adapter.{key}.weight", (n_out, n_in)), (f"adapter.{key}.bias", (n_out,))]
        return out

    @cached_property
    def slices(self):
        table, start = {}, 0
        for name, shape in self.entries():
            size = int(np.prod(shape))
            table[name] = (slice(start, start + size), shape)
            start += size
        return table

    @property
    def size(self):
        last = self.entries()[-1][0]
        return self.slices[last][0].stop

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "param_dim": self.param_dim,
            "student_features": dict(self.student_features),
            "expert_features": dict(self.expert_features),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["input_dim"], tuple(doc["hidden"]), doc["param_dim"],
                   dict(doc["student_features"]), dict(doc["expert_features"]))


@dataclass
class ModelState:
    spec: ModelSpec
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.spec.size,):
            raise ConfigurationError(f"state vector has shape {self.theta.shape}, spec needs ({self.spec.size},)")

    def param(self, name):
        """Writable view of one weight matrix or bias vector."""
        sl, shape = self.spec.slices[name]
        return self.theta[sl].reshape(shape)

    def copy(self):
        return ModelState(self.spec, self.theta.copy())

    def flatten(self):
        return self.theta.copy()

    @classmethod
    def unflatten(cls, spec, vec):
        return cls(spec, np.array(vec, dtype=float))

    def zeros_like(self):
        return ModelState(self.spec, np.zeros_like(self.theta))


def init_state(spec: ModelSpec, seed=0, head_scale=0.1):
    """Scaled-normal weights, zero biases; the parameter head starts near the rest pose."""
    rng = np.random.default_rng(seed)
    state = ModelState(spec, np.zeros(spec.size))
    for name, shape in spec.entries():
        if not name.endswith(".weight"):
            continue
        scale = 1.0 / np.sqrt(shape[1])
        if name.startswith("param_head"):
            scale *= head_scale
        state.param(name)[...] = rng.normal(size=shape) * scale
    return state


# ============ FORWARD / BACKWARD ============
def observation_vector(positions, confidence, camera):
    """Input row for one observation: subject-plane coordinates and confidence per keypoint.

    Positions of zero-confidence keypoints are masked to 0.
    """
    pos = np.asarray(positions, dtype=float)
    conf = np.asarray(confidence, dtype=float)
    cx, cy = camera.principal_point
    scale = camera.subject_depth / camera.focal_length
    present = conf > 0
    x = np.where(present, (pos[:, 0] - cx) * scale, 0.0)
    y = np.where(present, (pos[:, 1] - cy) * scale, 0.0)
    return np.stack([x, y, conf], axis=1).ravel()


@dataclass
class ForwardCache:
    activations: list        # input then each hidden layer output
    params: np.ndarray       # (B, P)
    student: dict            # part -> (B, student dim)
    adapted: dict            # part -> (B, expert dim)


def forward_batch(state: ModelState, inputs):
    spec = state.spec
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigurationError(f"input batch has shape {X.shape}, network expects (B, {spec.input_dim})")
    acts = [X]
    h = X
    for i in range(len(spec.hidden)):
        h = np.tanh(h @ state.param(f"hidden{i}.weight").T + state.param(f"hidden{i}.bias"))
        acts.append(h)

    params = h @ state.param("param_head.weight").T + state.param("param_head.bias")
    student = {}
    for key in ("body", "face"):
        student[key] = h @ state.param(f"feature_head.{key}.weight").T + state.param(f"feature_head.{key}.bias")
    hands = h @ state.param("feature_head.hand.weight").T + state.param("feature_head.hand.bias")
    n = spec.student_features["hand"]
    student["left_hand"], student["right_hand"] = hands[:, :n], hands[:, n:]

    adapted = {}
    for part in FEATURE_PARTS:
        key = adapter_key(part)
        adapted[part] = student[part] @ state.param(f"adapter.{key}.weight").T + state.param(f"adapter.{key}.bias")
    return ForwardCache(acts, params, student, adapted)


def backward_batch(state: ModelState, cache: ForwardCache, g_params, g_features=None):
    """Reverse pass given gradients on the parameter output and adapted features."""
    g_features = g_features or {}
    grad = state.zeros_like()
    h = cache.activations[-1]

    g_params = np.asarray(g_params, dtype=float)
    grad.param("param_head.weight")[...] += g_params.T @ h
    grad.param("param_head.bias")[...] += g_params.sum(axis=0)
    g_h = g_params @ state.param("param_head.weight")

    g_student = {}
    for part in FEATURE_PARTS:
        g = g_features.get(part)
        if g is None:
            g_student[part] = np.zeros_like(cache.student[part])
            continue
        key = adapter_key(part)
        grad.param(f"adapter.{key}.weight")[...] += g.T @ cache.student[part]
        grad.param(f"adapter.{key}.bias")[...] += g.sum(axis=0)
        g_student[part] = g @ state.param(f"adapter.{key}.weight")

    heads = {
        "body": g_student["body"],
        "face": g_student["face"],
        "hand": np.concatenate([g_student["left_hand"], g_student["right_hand"]], axis=1),
    }
    for key, g in heads.items():
        grad.param(f"feature_head.{key}.weight")[...] += g.T @ h
        grad.param(f"feature_head.{key}.bias")[...] += g.sum(axis=0)
        g_h = g_h + g @ state.param(f"feature_head.{key}.weight")

    for i in reversed(range(len(state.spec.hidden))):
        out, prev = cache.activations[i + 1], cache.activations[i]
        g_a = g_h * (1.0 - out**2)
        grad.param(f"hidden{i}.weight")[...] += g_a.T @ prev
        grad.param(f"hidden{i}.bias")[...] += g_a.sum(axis=0)
        g_h = g_a @ state.param(f"hidden{i}.weight")
    return grad.theta


def predict(state: ModelState, input_vec, tpl: SkeletonTemplate):
    """Single-sample forward: (FullBodyParams, adapted part features)."""
    cache = forward_batch(state, np.asarray(input_vec, dtype=float)[None])
    params = tpl.layout().from_vector(cache.params[0])
    return params, {part: cache.adapted[part][0] for part in FEATURE_PARTS}


# ============ BATCHES ============
@dataclass
class Batch:
    inputs: np.ndarray       # (B, 3K)
    positions: np.ndarray    # (B, K, 2) target keypoints
    visible: np.ndarray      # (B, K) bool
    pseudo: np.ndarray       # (B, P) pseudo-label parameter vectors
    features: dict           # part -> (B, expert dim)
    focal: np.ndarray        # (B,)
    principal: np.ndarray    # (B, 2)
    depth: np.ndarray        # (B,)

    def __len__(self):
        return len(self.inputs)


def build_batch(samples, tpl: SkeletonTemplate, cfg: LossConfig, inputs_from=None):
    """Stack curated samples; `inputs_from` replaces the network inputs (augmented views)."""
    if not samples:
        raise ConfigurationError("cannot build a batch from zero samples")
    layout = tpl.layout()
    thresholds = cfg.visibility_thresholds(tpl.keypoint_part)
    observations = inputs_from if inputs_from is not None else [s.observation for s in samples]
    cams = [s.scene.camera for s in samples]
    return Batch(
        inputs=np.stack([observation_vector(o.positions, o.confidence, c) for o, c in zip(observations, cams)]),
        positions=np.stack([np.asarray(s.observation.positions, dtype=float) for s in samples]),
        visible=np.stack([np.asarray(s.observation.confidence) > thresholds for s in samples]),
        pseudo=np.stack([layout.to_vector(s.pseudo) for s in samples]),
        features={part: np.stack([s.features[part] for s in samples]) for part in FEATURE_PARTS},
        focal=np.array([c.focal_length for c in cams], dtype=float),
        principal=np.array([c.principal_point for c in cams], dtype=float),
        depth=np.array([c.subject_depth for c in cams], dtype=float),
    )


# ============ LOSSES ============
def joint2d_batch(P, batch: Batch, tpl: SkeletonTemplate, tag_weights):
    """Per-tag L1 reprojection sums (B,) and the gradient of their weighted total w.r.t. P."""
    joints, markers, fk_cache = fk_batch(P, tpl)
    kp = keypoints_from(joints, markers, tpl)
    uv, z = project_batch(kp, batch.focal, batch.principal, batch.depth)
    vis = batch.visible
    diff = np.where(vis[..., None], uv - batch.positions, 0.0)
    per_kp = np.abs(diff).sum(axis=-1)
    tags = np.asarray(tpl.keypoint_part)
    values = {tag: per_kp[:, tags == tag].sum(axis=1) for tag in KEYPOINT_TAGS}

    wk = np.array([tag_weights.get(tag, 0.0) for tag in tags])
    g_uv = np.sign(diff) * wk[None, :, None]
    g_kp = project_batch_backward(kp, z, batch.focal, g_uv)
    g_joints, g_markers = keypoints_backward(g_kp, tpl)
    return values, fk_backward(fk_cache, tpl, g_joints, g_markers)


def loss_2d_joint(pred_params, tpl: SkeletonTemplate, camera, obs, cfg: LossConfig = None):
    """Σ v_j |x̂_j − x_j|₁ over all keypoints for one sample; (value, gradient w.r.t. the parameter vector)."""
    cfg = cfg or LossConfig()
    vec = pred_params if isinstance(pred_params, np.ndarray) else tpl.layout().to_vector(pred_params)
    batch = Batch(
        inputs=np.zeros((1, 0)),
        positions=np.asarray(obs.positions, dtype=float)[None],
        visible=(np.asarray(obs.confidence) > cfg.visibility_thresholds(obs.parts))[None],
        pseudo=np.zeros((1, len(vec))),
        features={},
        focal=np.array([camera.focal_length]),
        principal=np.array([camera.principal_point], dtype=float),
        depth=np.array([camera.subject_depth]),
    )
    values, grad = joint2d_batch(np.asarray(vec, dtype=float)[None], batch, tpl, {t: 1.0 for t in KEYPOINT_TAGS})
    return float(sum(v[0] for v in values.values())), grad[0]


def loss_pose(pred, pseudo):
    """‖θ − θ̂‖²; (value, gradient w.r.t. pred)."""
    pred = np.asarray(pred, dtype=float).ravel()
    pseudo = np.asarray(pseudo, dtype=float).ravel()
    if pred.shape != pseudo.shape:
        raise InvalidArgumentError(f"length mismatch: {pred.size} vs {pseudo.size}")
    d = pred - pseudo
    return float(d @ d), 2.0 * d


def loss_expression(pred, pseudo):
    return loss_pose(pred, pseudo)


def _log_softmax(x, temperature):
    z = np.asarray(x, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_feature_batch(pred, pseudo, amplification, temperature):
    """A·KL(softmax(f̂/T) ‖ softmax(f/T)) per row, and its gradient w.r.t. pred."""
    log_p = _log_softmax(pred, temperature)
    log_q = _log_softmax(pseudo, temperature)
    q = np.exp(log_q)
    value = amplification * np.sum(q * (log_q - log_p), axis=-1)
    grad = amplification * (np.exp(log_p) - q) / temperature
    return value, grad


def loss_feature(pred, pseudo, cfg: LossConfig = None):
    cfg = cfg or LossConfig()
    pred = np.asarray(pred, dtype=float)
    pseudo = np.asarray(pseudo, dtype=float)
    if pred.shape != pseudo.shape:
        raise InvalidArgumentError(f"feature dims differ: {pred.shape} vs {pseudo.shape}")
    value, grad = kl_feature_batch(pred[None], pseudo[None], cfg.amplification, cfg.temperature)
    return float(value[0]), grad[0]


def _consistency(za, zb):
    za = np.asarray(za, dtype=float)
    zb = np.asarray(zb, dtype=float)
    na = np.linalg.norm(za, axis=-1, keepdims=True)
    nb = np.linalg.norm(zb, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("consistency loss needs nonzero output vectors")
    cos = np.sum(za * zb, axis=-1, keepdims=True) / (na * nb)
    value = 2.0 - 2.0 * cos[..., 0]
    ga = -2.0 * (zb / (na * nb) - cos * za / na**2)
    gb = -2.0 * (za / (na * nb) - cos * zb / nb**2)
    return value, ga, gb


def ema_consistency_loss(z_a, z_b):
    """2 − 2·cos(z_a, z_b); (value, gradient w.r.t. z_a, gradient w.r.t. z_b)."""
    value, ga, gb = _consistency(np.asarray(z_a, dtype=float)[None], np.asarray(z_b, dtype=float)[None])
    return float(value[0]), ga[0], gb[0]


def ema_consistency_normalized(z_a, z_b):
    """‖z_a/‖z_a‖ − z_b/‖z_b‖‖², the other form of the consistency loss."""
    z_a = np.asarray(z_a, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    na, nb = np.linalg.norm(z_a), np.linalg.norm(z_b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("consistency loss needs nonzero output vectors")
    d = z_a / na - z_b / nb
    return float(d @ d)


def ema_consistency_batch(z_a, z_b):
    return _consistency(z_a, z_b)


@dataclass
class LossBreakdown:
    terms: dict                                       # weighted batch means
    consistency: dict = field(default_factory=dict)  # o->t, t->o when training with EMA

    def part_total(self, part):
        return sum(self.terms[name] for name in TERMS_BY_PART[part])

    @property
    def body(self):
        return self.part_total("body")

    @property
    def face(self):
        return self.part_total("face")

    @property
    def hand(self):
        return self.part_total("hand")

    @property
    def total(self):
        return self.body + self.face + self.hand

    @property
    def ema_total(self):
        return self.total + sum(self.consistency.values())

    def as_row(self):
        row = dict(self.terms)
        row.update({f"consistency_{k}": v for k, v in self.consistency.items()})
        row.update(body=self.body, face=self.face, hand=self.hand, total=self.total)
        if self.consistency:
            row["ema_total"] = self.ema_total
        return row

    @staticmethod
    def mean(items):
        items = list(items)
        terms = {name: float(np.mean([b.terms[name] for b in items])) for name in TERM_NAMES}
        keys = items[0].consistency.keys() if items else ()
        consistency = {k: float(np.mean([b.consistency[k] for b in items])) for k in keys}
        return LossBreakdown(terms, consistency)


def output_losses(cache: ForwardCache, batch: Batch, tpl: SkeletonTemplate, cfg: LossConfig):
    """Every distillation term on a forward pass; (breakdown, d/d params, d/d adapted features)."""
    w = cfg.weights
    B = len(batch)
    P = cache.params
    lay = tpl.layout()
    terms = {name: 0.0 for name in TERM_NAMES}
    g_params = np.zeros_like(P)
    g_features = {}

    tag_weights = {"body": w.joint2d_body, "face": w.joint2d_face, "hand": w.joint2d_hand}
    if any(v > 0 for v in tag_weights.values()):
        values, g = joint2d_batch(P, batch, tpl, tag_weights)
        scale = batch.depth / batch.focal if cfg.joint2d_units == "subject_plane" else np.ones(B)
        for tag in KEYPOINT_TAGS:
            terms[f"joint2d_{tag}"] = tag_weights[tag] * float((scale * values[tag]).mean())
        g_params += g * scale[:, None] / B

    squared = (
        ("pose", w.pose, ("body_pose",)),
        ("jaw_pose", w.jaw_pose, ("face_jaw",)),
        ("expression", w.expression, ("expression",)),
        ("hand_pose", w.hand_pose, ("left_pose", "right_pose")),
    )
    for name, weight, keys in squared:
        if weight == 0:
            continue
        total = np.zeros(B)
        for key in keys:
            sl = lay[key]
            d = P[:, sl] - batch.pseudo[:, sl]
            total += np.sum(d * d, axis=1)
            g_params[:, sl] += weight * 2.0 * d / B
        terms[name] = weight * float(total.mean())

    feature_weight = {"body": w.feature_body, "face": w.feature_face, "left_hand": w.feature_hand,
                      "right_hand": w.feature_hand}
    for part in FEATURE_PARTS:
        weight = feature_weight[part]
        if weight == 0 or part not in batch.features:
            continue
        value, g = kl_feature_batch(cache.adapted[part], batch.features[part], cfg.amplification, cfg.temperature)
        name = f"feature_{adapter_key(part)}"
        terms[name] += weight * float(value.mean())
        g_features[part] = weight * g / B

    return LossBreakdown(terms), g_params, g_features


def loss_total(state: ModelState, batch: Batch, tpl: SkeletonTemplate, cfg: LossConfig):
    """L_total = L_body + L_face + L_hand over a batch; (breakdown, gradient w.r.t. state.theta)."""
    cache = forward_batch(state, batch.inputs)
    breakdown, g_params, g_features = output_losses(cache, batch, tpl, cfg)
    return breakdown, backward_batch(state, cache, g_params, g_features)


# ============ OPTIMIZER ============
@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(theta, grad, moments: AdamMoments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new theta, new moments)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != moments.m.shape or np.shape(theta) != moments.m.shape:
        raise InvalidArgumentError(f"moments have shape {moments.m.shape}, gradient {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient, update refused")
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grad
    v = beta2 * moments.v + (1.0 - beta2) * grad**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_theta = np.asarray(theta, dtype=float) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamMoments(m, v, t)


def scheduled_lr(opt: OptimizerConfig, epoch):
    """Base rate, multiplied by decay_factor once epoch reaches decay_epoch."""
    return opt.lr * opt.decay_factor if epoch >= opt.decay_epoch else opt.lr


# ============ GRADIENT ORACLE ============
def finite_difference_gradient(fn, x, h=1e-5, indices=None):
    """Central differences of a scalar functional; only `indices` when given."""
    if not h > 0:
        raise InvalidArgumentError(f"step must be > 0, got {h}")
    x = np.array(x, dtype=float)
    flat = x.ravel()
    coords = range(flat.size) if indices is None else indices
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        out[n] = (up - down) / (2.0 * h)
    return out if indices is not None else out.reshape(x.shape)
