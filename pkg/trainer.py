# trainer.py
"""Training loops: distillation from curated pseudo labels, and EMA teacher-student
self-supervision on two augmented views of each sample."""
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from curation import SelectionConfig, curate
from errors import ConfigurationError, InvalidArgumentError
from evaluation import evaluate
from learn import (AdamMoments, LossBreakdown, LossConfig, ModelSpec, NetworkConfig, OptimizerConfig,
                   adam_step, backward_batch, build_batch, ema_consistency_batch, forward_batch, init_state,
                   loss_total, output_losses, scheduled_lr)
from synth import KeypointObservation, derive_seed

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "pseudo_gt", "selection", "ema")
# other accepted spellings of the EMA directions
DIRECTION_ALIASES = {"paper-text": "teacher-learns"}


class EmaConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    decay: float = Field(default=0.99, ge=0, le=1)
    # teacher-learns: teacher takes gradient steps, student follows by EMA
    direction: Literal["teacher-learns", "conventional"] = "teacher-learns"
    start_epoch: int = Field(default=0, ge=0)
    consistency_weight: float = Field(default=1.0, ge=0)

    @field_validator("direction", mode="before")
    @classmethod
    def _direction_alias(cls, value):
        return DIRECTION_ALIASES.get(value, value) if isinstance(value, str) else value


class AugmentationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    jitter: float = Field(default=0.0, ge=0)        # pixels
    rotation: float = Field(default=0.0, ge=0)      # max |angle|, radians
    dropout: float = Field(default=0.0, ge=0, le=1)


@dataclass
class TrainRun:
    config: dict
    seed: int
    state: object = None                             # inference model (the student)
    teacher: object = None
    losses: list = field(default_factory=list)       # per-epoch LossBreakdown rows
    metrics: list = field(default_factory=list)      # per-epoch MetricReport rows
    checkpoints: list = field(default_factory=list)

    def history(self):
        """Per-epoch loss terms joined with eval metrics."""
        frame = pd.DataFrame(self.losses)
        if self.metrics:
            frame = frame.merge(pd.DataFrame(self.metrics), on="epoch", how="left")
        return frame

    def final_loss(self):
        return self.losses[-1]["total"] if self.losses else float("nan")


# ============ AUGMENTATION ============
def rotate_keypoints(positions, angle, center):
    """In-plane rotation of pixel positions about a center."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    center = np.asarray(center, dtype=float)
    return (np.asarray(positions, dtype=float) - center) @ R.T + center


def augment(obs: KeypointObservation, aug: AugmentationConfig, seed, center=(512.0, 512.0)):
    """Rotation about the principal point, then jitter and dropout."""
    rng = np.random.default_rng(seed)
    positions = np.array(obs.positions, dtype=float)
    confidence = np.array(obs.confidence, dtype=float)
    if aug.rotation > 0:
        positions = rotate_keypoints(positions, rng.uniform(-aug.rotation, aug.rotation), center)
    if aug.jitter > 0:
        positions = positions + rng.normal(0.0, aug.jitter, size=positions.shape)
    if aug.dropout > 0:
        confidence[rng.random(len(confidence)) < aug.dropout] = 0.0
    return KeypointObservation(positions=positions, confidence=confidence, parts=obs.parts)


# ============ LOOPS ============
def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng(derive_seed(seed, epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epochs(opt, progress, desc):
    return tqdm(range(opt.epochs), desc=desc, disable=not progress, leave=False)


def _record_eval(run, epoch, state, eval_fn):
    if eval_fn is not None:
        run.metrics.append({"epoch": epoch, **eval_fn(state).to_row()})


def train_distill(samples, state, tpl, opt: OptimizerConfig, loss_cfg: LossConfig, seed=0,
                  eval_fn=None, config=None, progress=False):
    """Mini-batch Adam on L_total over curated samples; returns the TrainRun."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("training set is empty (no curated samples)")
    state = state.copy()
    moments = AdamMoments.zeros(state.spec.size)
    run = TrainRun(config=config or {}, seed=seed)

    for epoch in _epochs(opt, progress, "distill"):
        lr = scheduled_lr(opt, epoch)
        parts = []
        for idx in _batches(len(samples), opt.batch_size, seed, epoch):
            batch = build_batch([samples[i] for i in idx], tpl, loss_cfg)
            breakdown, grad = loss_total(state, batch, tpl, loss_cfg)
            state.theta, moments = adam_step(state.theta, grad, moments, lr, opt.beta1, opt.beta2, opt.eps)
            parts.append(breakdown)
        row = {"epoch": epoch, "lr": lr, **LossBreakdown.mean(parts).as_row()}
        run.losses.append(row)
        logger.debug("epoch %d: total %.6g", epoch, row["total"])
        _record_eval(run, epoch, state, eval_fn)

    run.state = state
    if run.losses:
        logger.info("distillation finished after %d epochs, final loss %.6g", opt.epochs, run.final_loss())
    return run


def ema_update(receiver, source, tau):
    """new = tau * receiver + (1 - tau) * source, coordinate-wise."""
    if receiver.spec != source.spec or receiver.theta.shape != source.theta.shape:
        raise InvalidArgumentError("EMA update between networks of different shapes")
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgumentError(f"decay must be in [0, 1], got {tau}")
    out = receiver.copy()
    out.theta = tau * receiver.theta + (1.0 - tau) * source.theta
    return out


def train_ema(samples, student, teacher, tpl, opt: OptimizerConfig, loss_cfg: LossConfig,
              ema: EmaConfig, aug: AugmentationConfig, seed=0, eval_fn=None, config=None, progress=False):
    """L_EMA = L_total + L_{o->t} + L_{t->o} on the gradient-updated network; the other follows by EMA.

    The student is the returned inference model in both directions.
    """
    if not ema.enabled:
        return train_distill(samples, student, tpl, opt, loss_cfg, seed, eval_fn, config, progress)
    samples = list(samples)
    if not samples:
        raise ConfigurationError("training set is empty (no curated samples)")
    nets = {"student": student.copy(), "teacher": teacher.copy()}
    learner, follower = ("teacher", "student") if ema.direction == "teacher-learns" else ("student", "teacher")
    moments = AdamMoments.zeros(student.spec.size)
    run = TrainRun(config=config or {}, seed=seed)

    for epoch in _epochs(opt, progress, "ema"):
        lr = scheduled_lr(opt, epoch)
        active = epoch >= ema.start_epoch
        parts = []
        for step, idx in enumerate(_batches(len(samples), opt.batch_size, seed, epoch)):
            chunk = [samples[i] for i in idx]
            # view a goes to the teacher, view b to the student
            views = {"teacher": [], "student": []}
            for i, s in zip(idx, chunk):
                center = s.scene.camera.principal_point
                views["teacher"].append(augment(s.observation, aug, derive_seed(seed, epoch, step, i, 0), center))
                views["student"].append(augment(s.observation, aug, derive_seed(seed, epoch, step, i, 1), center))

            net = nets[learner]
            batch = build_batch(chunk, tpl, loss_cfg, inputs_from=views[learner])
            cache = forward_batch(net, batch.inputs)
            breakdown, g_params, g_features = output_losses(cache, batch, tpl, loss_cfg)

            if active and ema.consistency_weight > 0:
                other = build_batch(chunk, tpl, loss_cfg, inputs_from=views[follower])
                z_other = forward_batch(nets[follower], other.inputs).params
                w, B = ema.consistency_weight, len(idx)
                # both directions, gradient stopped through the follower's output
                v_ab, g_ab, _ = ema_consistency_batch(cache.params, z_other)
                v_ba, _, g_ba = ema_consistency_batch(z_other, cache.params)
                names = ("t_to_o", "o_to_t") if learner == "teacher" else ("o_to_t", "t_to_o")
                breakdown.consistency = {names[0]: w * float(v_ab.mean()), names[1]: w * float(v_ba.mean())}
                g_params = g_params + w * (g_ab + g_ba) / B
            else:
                breakdown.consistency = {"o_to_t": 0.0, "t_to_o": 0.0}

            grad = backward_batch(net, cache, g_params, g_features)
            net.theta, moments = adam_step(net.theta, grad, moments, lr, opt.beta1, opt.beta2, opt.eps)
            if active:
                nets[follower] = ema_update(nets[follower], net, ema.decay)
            parts.append(breakdown)

        row = {"epoch": epoch, "lr": lr, **LossBreakdown.mean(parts).as_row()}
        run.losses.append(row)
        logger.debug("epoch %d: ema total %.6g", epoch, row["ema_total"])
        _record_eval(run, epoch, nets["student"], eval_fn)

    run.state = nets["student"]
    run.teacher = nets["teacher"]
    if run.losses:
        logger.info("EMA training finished after %d epochs (%s), final loss %.6g",
                    opt.epochs, ema.direction, run.final_loss())
    return run


# ============ EXPERIMENTS ============
def variant_settings(variant, selection: SelectionConfig, loss_cfg: LossConfig, ema: EmaConfig):
    """Selection, loss and EMA settings of one ablation row."""
    if variant == "baseline":
        return (selection.model_copy(update={"enabled": False}),
                loss_cfg.model_copy(update={"weights": loss_cfg.weights.pseudo_free()}),
                ema.model_copy(update={"enabled": False}))
    if variant == "pseudo_gt":
        return selection.model_copy(update={"enabled": False}), loss_cfg, ema.model_copy(update={"enabled": False})
    if variant == "selection":
        return selection, loss_cfg, ema.model_copy(update={"enabled": False})
    if variant == "ema":
        return selection, loss_cfg, ema.model_copy(update={"enabled": True})
    raise InvalidArgumentError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")


def run_variant(variant, train_entries, eval_entries, tpl, *, selection, loss_cfg, network: NetworkConfig,
                opt, ema, aug, seed=0, threads=1, progress=False):
    """Curate, train and evaluate one ablation row; (TrainRun, final MetricReport)."""
    selection, loss_cfg, ema = variant_settings(variant, selection, loss_cfg, ema)
    samples, report = curate(train_entries, tpl, selection, threads)
    logger.info("variant %s: %d training samples", variant, report.kept)
    spec = ModelSpec.build(tpl, network, loss_cfg.feature_dims)
    student = init_state(spec, derive_seed(seed, 0), network.head_scale)
    teacher = student.copy()
    config = {"variant": variant, "selection": selection.model_dump(), "loss": loss_cfg.model_dump(),
              "ema": ema.model_dump(), "optimizer": opt.model_dump()}
    run = train_ema(samples, student, teacher, tpl, opt, loss_cfg, ema, aug, seed, config=config,
                    progress=progress)
    return run, evaluate(run.state, eval_entries, tpl)


def data_scaling_curve(samples, sizes, eval_entries, tpl, *, loss_cfg, network, opt, seed=0, progress=False):
    """Train on nested prefixes of one curated set; [(size, MetricReport)]."""
    samples = list(samples)
    out = []
    for n in sorted(sizes):
        if n > len(samples):
            raise InvalidArgumentError(f"requested {n} training samples, only {len(samples)} curated")
        spec = ModelSpec.build(tpl, network, loss_cfg.feature_dims)
        state = init_state(spec, derive_seed(seed, 0), network.head_scale)
        run = train_distill(samples[:n], state, tpl, opt, loss_cfg, seed, progress=progress)
        out.append((n, evaluate(run.state, eval_entries, tpl)))
        logger.info("data scaling: %d samples -> PA-MPJPE %.2f mm", n, out[-1][1].pa_mpjpe)
    return out
