"""Two-stage training and sliding-window label-fusion inference.

Stage 1 pretrains encoder + projection with a contrastive objective (or
a classification head for the cross-entropy baseline; "none" keeps the
random initialization). Stage 2 freezes the encoder by default and
trains the decoder with the soft-overlap loss on un-augmented patches.
The optimizer is plain SGD with a fixed step: no momentum, no decay, no
schedule, which keeps runs bit-reproducible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CapacityError, StructuralError, ValidationError
from .losses import ContrastiveBatchView, agcl_loss, dice_seg_loss, sscl_loss
from .network import (
    ModelConfig,
    ModelParams,
    bind_params,
    decoder_apply,
    encoder_apply,
    head_apply,
    init_params,
    projection_apply,
    segment_views,
)
from .patches import build_minibatch, extract_query_patches
from .phantom import _derive_seed

log = logging.getLogger(__name__)

LOSS_KINDS = ("sscl", "agcl", "ce", "none")


@dataclass(frozen=True)
class Stage1Config:
    loss: str = "agcl"
    temp: float = 0.1
    epochs: int = 12
    batch_pairs: int = 16
    lr: float = 0.03
    steps_per_epoch: int = 40
    modality_filter: tuple | None = None
    label_fraction: float = 1.0

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"unknown stage-1 loss {self.loss!r}")
        if self.temp <= 0:
            raise ValidationError("temp must be positive")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_pairs < 1:
            raise ValidationError("epochs/steps/batch must be positive")
        if not (0.0 <= self.label_fraction <= 1.0):
            raise ValidationError("label_fraction must be in [0, 1]")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 12
    batch: int = 16
    lr: float = 0.002
    steps_per_epoch: int = 40
    freeze_encoder: bool = True
    n_label_images: int = 0   # 0 = every training image carries labels

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch < 1:
            raise ValidationError("epochs/steps/batch must be positive")
        if self.n_label_images < 0:
            raise ValidationError("n_label_images must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    n_per_object: int = 8
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.stage1.validate()
        self.stage2.validate()
        if self.n_per_object < 1:
            raise ValidationError("n_per_object must be >= 1")


@dataclass
class TrainHistory:
    stage: str
    loss_kind: str
    epoch_losses: list = field(default_factory=list)   # mean over the epoch's batches
    step_losses: list = field(default_factory=list)
    probe_losses: list = field(default_factory=list)   # fixed-batch loss at epoch end
    wall_clock_s: float = 0.0
    seed: int = 0

    def probe_decrease_fraction(self) -> float:
        """Fraction of adjacent epoch ends where the fixed-probe loss
        decreased; 1.0 when fewer than two epochs ran."""
        p = self.probe_losses
        if len(p) < 2:
            return 1.0
        return sum(b < a for a, b in zip(p, p[1:])) / (len(p) - 1)


def extract_pool(samples: list, cfg: TrainConfig, stream: int) -> list:
    """Patch pool over a sample list; one seed stream per purpose."""
    pool = []
    for i, sample in enumerate(samples):
        if sample.attention is None:
            raise StructuralError(f"sample {sample.sample_id} lacks attention maps")
        pool.extend(extract_query_patches(
            sample, sample.attention, cfg.n_per_object,
            cfg.model.patch_size, _derive_seed(cfg.seed, stream, i)))
    if not pool:
        raise CapacityError("no patches could be extracted from the dataset")
    return pool


def _sgd(params: ModelParams, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        base = params.tensors[name]
        params.tensors[name] = (base - lr * g.astype(base.dtype)).astype(base.dtype)


def _one_hot_labels(labels: np.ndarray, n_objects: int, n_modalities: int):
    classes = (labels[:, 0] - 1) * n_objects + (labels[:, 1] - 1)
    if classes.min() < 0 or classes.max() >= n_objects * n_modalities:
        raise StructuralError("label outside the declared (M, O) grid")
    onehot = np.zeros((labels.shape[0], n_objects * n_modalities))
    onehot[np.arange(labels.shape[0]), classes] = 1.0
    return onehot


def cross_entropy_loss(logits: ad.Var, onehot: np.ndarray):
    """Negative log-likelihood summed over the batch (matching the
    sum-reduced contrastive objectives, so one step size serves all
    stage-1 kinds); the softmax shift is a constant, gradients exact."""
    tape = logits.tape
    shift = tape.constant(logits.value.max(axis=1, keepdims=True))
    shifted = ad.sub(logits, shift)
    lse = ad.add(ad.log(ad.reduce_sum(ad.exp(shifted), axis=1, keepdims=True)),
                 shift)
    picked = ad.reduce_sum(ad.mul(logits, tape.constant(onehot)),
                           axis=1, keepdims=True)
    return ad.reduce_sum(ad.sub(lse, picked))


def pretrain_stage1(samples: list, cfg: TrainConfig,
                    n_objects: int | None = None,
                    n_modalities: int | None = None):
    """Train encoder + projection (or CE head); returns frozen-encoder params."""
    cfg.validate()
    s1 = cfg.stage1
    started = time.perf_counter()
    if n_objects is None:
        n_objects = max(len(s.gt_masks) for s in samples)
    if n_modalities is None:
        n_modalities = max(s.modality for s in samples)

    if s1.loss == "none":
        params = init_params(cfg.model, cfg.seed)
        params.frozen["enc"] = True
        history = TrainHistory(stage="stage1", loss_kind="none", seed=cfg.seed,
                               wall_clock_s=time.perf_counter() - started)
        return params, history

    n_classes = n_objects * n_modalities if s1.loss == "ce" else 0
    params = init_params(cfg.model, cfg.seed, n_classes=n_classes)
    pool = extract_pool(samples, cfg, stream=11)
    if s1.modality_filter is not None:
        available = sum(1 for q in pool if q.modality in set(s1.modality_filter))
        if available < s1.batch_pairs:
            raise CapacityError(
                f"modality filter leaves {available} patches, "
                f"need {s1.batch_pairs}")

    train_components = ("enc", "head") if s1.loss == "ce" else ("enc", "proj")
    history = TrainHistory(stage="stage1", loss_kind=s1.loss, seed=cfg.seed)
    for epoch in range(s1.epochs):
        losses = []
        for step in range(s1.steps_per_epoch):
            batch = build_minibatch(
                pool, s1.batch_pairs, modality_filter=s1.modality_filter,
                label_fraction=s1.label_fraction,
                seed=_derive_seed(cfg.seed, 12, epoch, step))
            tape = ad.Tape(np.float32)
            pv = bind_params(tape, params, train_components=train_components)
            views = tape.input("views", batch.views, trainable=False)
            z, _ = encoder_apply(pv, views, cfg.model)
            if s1.loss == "ce":
                logits = head_apply(pv, z)
                onehot = _one_hot_labels(batch.labels, n_objects, n_modalities)
                loss_node = cross_entropy_loss(logits, onehot)
                loss_val = float(loss_node.value)
            else:
                zt = projection_apply(pv, z, s1.temp)
                view = ContrastiveBatchView(
                    embeddings=zt, pairing=batch.pairing, labels=batch.labels,
                    visible=batch.visible, temperature=s1.temp)
                loss = sscl_loss(view) if s1.loss == "sscl" else agcl_loss(view)
                loss_node, loss_val = loss.node, loss.value
            tape.backward(loss_node)
            grads = {name: var.grad for name, var in pv.items()
                     if var.requires_grad and var.grad is not None}
            _sgd(params, grads, s1.lr)
            losses.append(loss_val)
            history.step_losses.append(loss_val)
        history.epoch_losses.append(float(np.mean(losses)))
        log.info("stage1[%s] epoch %d/%d loss %.4f", s1.loss, epoch + 1,
                 s1.epochs, history.epoch_losses[-1])
    params.frozen["enc"] = True
    history.wall_clock_s = time.perf_counter() - started
    return params, history


def finetune_stage2(samples: list, pretrained: ModelParams, cfg: TrainConfig):
    """Train the decoder on (patch, label) pairs; encoder frozen by default."""
    cfg.validate()
    s2 = cfg.stage2
    started = time.perf_counter()
    if "dec.out.w" not in pretrained.tensors:
        raise StructuralError("pretrained params carry no decoder tensors")
    params = pretrained.copy()
    # the label-scarce protocol: stage 1 consumed every image unlabeled,
    # stage 2 sees pixel labels for only the first n_label_images of them
    labelled = samples
    if s2.n_label_images:
        labelled = samples[:s2.n_label_images]
    pool = extract_pool(labelled, cfg, stream=21)
    if len(pool) < s2.batch:
        raise CapacityError(f"stage 2 needs {s2.batch} patches, have {len(pool)}")

    train_components = ("dec",) if s2.freeze_encoder else ("dec", "enc")
    history = TrainHistory(stage="stage2", loss_kind="dice", seed=cfg.seed)
    probe = pool[:min(64, len(pool))]
    probe_views = np.stack([q.a for q in probe])
    probe_fg = np.stack([q.y for q in probe]).astype(np.float32)
    probe_y = np.stack([1.0 - probe_fg, probe_fg], axis=1)
    for epoch in range(s2.epochs):
        losses = []
        for step in range(s2.steps_per_epoch):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                _derive_seed(cfg.seed, 22, epoch, step))))
            idx = rng.choice(len(pool), size=s2.batch, replace=False)
            views = np.stack([pool[i].a for i in idx])
            fg = np.stack([pool[i].y for i in idx]).astype(np.float32)
            y = np.stack([1.0 - fg, fg], axis=1)
            tape = ad.Tape(np.float32)
            pv = bind_params(tape, params, train_components=train_components)
            a = tape.input("a", views, trainable=False)
            _, spatial = encoder_apply(pv, a, cfg.model)
            s = decoder_apply(pv, spatial, cfg.model)
            loss = dice_seg_loss(s, y)
            tape.backward(loss.node)
            grads = {name: var.grad for name, var in pv.items()
                     if var.requires_grad and var.grad is not None}
            _sgd(params, grads, s2.lr)
            losses.append(loss.value / s2.batch)
            history.step_losses.append(losses[-1])
        history.epoch_losses.append(float(np.mean(losses)))
        probe_loss = dice_seg_loss(
            segment_views(params, probe_views), probe_y)
        history.probe_losses.append(probe_loss.value / len(probe))
        log.info("stage2 epoch %d/%d dice-loss %.4f probe %.4f", epoch + 1,
                 s2.epochs, history.epoch_losses[-1],
                 history.probe_losses[-1])
    params.frozen["dec"] = False
    history.wall_clock_s = time.perf_counter() - started
    return params, history


# ---------------------------------------------------------------------------
# inference

def _grid_positions(extent: int, patch: int, stride: int) -> list:
    lo, hi = patch // 2, extent - patch // 2
    positions = list(range(lo, hi + 1, stride))
    if positions[-1] != hi:
        positions.append(hi)
    return positions


def infer_segmentation(sample, attention: list, params: ModelParams,
                       stride: int | None = None, threshold: float = 0.5,
                       predict_fn=None, chunk: int = 64) -> np.ndarray:
    """Fused multi-object label map over a whole image.

    Per object, p x p windows on a stride grid that intersect the
    object's attention foreground are pushed through encoder + decoder;
    overlapping foreground probabilities are averaged. Fusion assigns
    each pixel to the highest-probability object (ties to the lowest
    id), or background when the best probability falls below threshold.
    """
    p = params.config.patch_size
    stride = stride or max(1, p // 2)
    image = np.asarray(sample.image)
    h, w = image.shape
    if len(attention) == 0 or all(np.asarray(a).sum() == 0 for a in attention):
        log.warning("sample %s: no attention foreground, returning background",
                    getattr(sample, "sample_id", "?"))
        return np.zeros((h, w), dtype=np.int64)
    if predict_fn is None:
        def predict_fn(views, corners, obj_idx):
            return segment_views(params, views)[:, 1]

    prob = np.zeros((len(attention), h, w))
    for o, att in enumerate(attention):
        att = np.asarray(att)
        acc = np.zeros((h, w))
        cnt = np.zeros((h, w))
        corners = []
        for cy in _grid_positions(h, p, stride):
            for cx in _grid_positions(w, p, stride):
                top, left = cy - p // 2, cx - p // 2
                if att[top:top + p, left:left + p].any():
                    corners.append((top, left))
        for start in range(0, len(corners), chunk):
            part = corners[start:start + chunk]
            views = np.stack([
                np.stack([image[t:t + p, l:l + p],
                          att[t:t + p, l:l + p].astype(image.dtype)])
                for t, l in part])
            fg = predict_fn(views.astype(np.float32), part, o)
            for (t, l), pm in zip(part, fg):
                acc[t:t + p, l:l + p] += pm
                cnt[t:t + p, l:l + p] += 1.0
        covered = cnt > 0
        acc[covered] /= cnt[covered]
        prob[o] = acc
    best = prob.argmax(axis=0)
    best_p = np.take_along_axis(prob, best[None], axis=0)[0]
    labels = np.where(best_p >= threshold, best + 1, 0)
    return labels.astype(np.int64)
