"""Segmentation and contrastive losses, with a brute-force oracle.

Contrastive temperature handling: batch embeddings arrive on the sphere
of radius 1/T (that is the interface invariant), but similarity logits
are cos(theta)/T, i.e. the losses renormalize rows to unit length and
divide by T exactly once. Applying the 1/T radius *and* a /T inside the
exponent would double-scale.

Per-anchor positive sets: the class-conditional loss pools every other
label-visible sample with the anchor's (modality, object) pair; anchors
that are label-hidden, or whose positive set would be empty, fall back
to the single augmented-twin positive, so no anchor is ever skipped and
label fraction interpolates continuously between the self-supervised
and the class-conditional objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericError, RangeError, StructuralError, ValidationError

DICE_EPS = 1e-5
ORACLE_LOGIT_LIMIT = 30.0


@dataclass
class ContrastiveBatchView:
    """Embeddings plus the bookkeeping the contrastive losses consume."""

    embeddings: object            # (2N, E) ndarray or autodiff Var
    pairing: np.ndarray           # (2N,) fixed-point-free involution
    labels: np.ndarray            # (2N, 2) rows (modality, object)
    visible: np.ndarray           # (2N,) bool
    temperature: float

    def size(self) -> int:
        emb = self.embeddings.value if isinstance(self.embeddings, ad.Var) \
            else np.asarray(self.embeddings)
        return emb.shape[0]

    def validate(self) -> None:
        n = self.size()
        if n < 2:
            raise StructuralError("contrastive batch needs at least one pair")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        p = np.asarray(self.pairing)
        idx = np.arange(n)
        if p.shape != (n,) or np.any(p[p] != idx) or np.any(p == idx):
            raise StructuralError("pairing must be a fixed-point-free involution")
        emb = self.embeddings.value if isinstance(self.embeddings, ad.Var) \
            else np.asarray(self.embeddings)
        norms = np.sqrt((np.asarray(emb, dtype=np.float64) ** 2).sum(axis=1))
        radius = 1.0 / self.temperature
        if np.any(np.abs(norms - radius) > 1e-6 * max(1.0, radius)):
            worst = float(np.abs(norms - radius).max())
            raise NumericError(
                f"embedding rows must sit on the 1/T sphere "
                f"(radius {radius:.6g}, worst deviation {worst:.3g})")


@dataclass
class LossValue:
    """Scalar loss with its per-term decomposition.

    `node` carries the differentiable scalar when the loss was built on a
    tape; oracle evaluations leave it None.
    """

    value: float
    per_term: np.ndarray
    skipped: int = 0
    node: ad.Var | None = None


# ---------------------------------------------------------------------------
# segmentation loss

def _check_one_hot(y: np.ndarray) -> None:
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("label tensor must be binary")
    if not np.all(y.sum(axis=1) == 1):
        raise ValidationError("label tensor must be one-hot across channels")


def dice_seg_loss(s, y: np.ndarray) -> LossValue:
    """Soft-overlap loss summed over the batch.

    Per sample the foreground channel contributes
    1 - 2*(sum(s*y) + eps) / (sum(s) + sum(y) + eps) with eps = 1e-5;
    s may be an autodiff Var (gradients flow through s only).
    """
    y = np.asarray(y)
    tape = s.tape if isinstance(s, ad.Var) else ad.Tape(np.float64)
    sv = s if isinstance(s, ad.Var) else tape.input("s", s, trainable=False)
    if sv.value.ndim != 4 or sv.value.shape[1] != 2:
        raise StructuralError(f"predictions must be (B, 2, h, w), got {sv.value.shape}")
    if y.shape != sv.value.shape:
        raise StructuralError(
            f"label shape {y.shape} != prediction shape {sv.value.shape}")
    _check_one_hot(y)

    fg = np.zeros_like(y, dtype=float)
    fg[:, 1] = y[:, 1]
    fg_mask = np.zeros_like(y, dtype=float)
    fg_mask[:, 1] = 1.0
    inter = ad.reduce_sum(ad.mul(sv, tape.constant(fg)), axis=(1, 2, 3))
    s_sum = ad.reduce_sum(ad.mul(sv, tape.constant(fg_mask)), axis=(1, 2, 3))
    y_sum = tape.constant(y[:, 1].sum(axis=(1, 2)).astype(float))
    num = ad.mul(ad.add(inter, DICE_EPS), 2.0)
    den = ad.add(ad.add(s_sum, y_sum), DICE_EPS)
    terms = ad.sub(1.0, ad.div(num, den))
    total = ad.reduce_sum(terms)
    return LossValue(value=float(total.value), per_term=terms.value.copy(),
                     node=total)


# ---------------------------------------------------------------------------
# contrastive losses

def _positive_weights(batch: ContrastiveBatchView) -> np.ndarray:
    """Row-normalized positive mask; fallback to the augmented twin."""
    n = batch.size()
    labels = np.asarray(batch.labels)
    visible = np.asarray(batch.visible, dtype=bool)
    pairing = np.asarray(batch.pairing)
    weights = np.zeros((n, n))
    for k in range(n):
        if visible[k]:
            same = (labels[:, 0] == labels[k, 0]) & (labels[:, 1] == labels[k, 1])
            positives = np.flatnonzero(same & visible)
            positives = positives[positives != k]
        else:
            positives = np.empty(0, dtype=int)
        if positives.size == 0:
            positives = np.array([pairing[k]])
        weights[k, positives] = 1.0 / positives.size
    return weights


def _pair_weights(batch: ContrastiveBatchView) -> np.ndarray:
    n = batch.size()
    weights = np.zeros((n, n))
    weights[np.arange(n), np.asarray(batch.pairing)] = 1.0
    return weights


def _contrastive_core(batch: ContrastiveBatchView,
                      weights: np.ndarray) -> LossValue:
    batch.validate()
    n = batch.size()
    if isinstance(batch.embeddings, ad.Var):
        z = batch.embeddings
        tape = z.tape
    else:
        tape = ad.Tape(np.float64)
        z = tape.input("z", np.asarray(batch.embeddings), trainable=False)
    t = batch.temperature
    unit = ad.normalize_rows(z, 1.0)
    logits = ad.mul(ad.matmul(unit, ad.transpose(unit)), 1.0 / t)
    others = (1.0 - np.eye(n))
    lse = ad.logsumexp_rows(logits, others)                       # (n, 1)
    pos = ad.reduce_sum(ad.mul(logits, tape.constant(weights)),
                        axis=1, keepdims=True)                    # (n, 1)
    terms = ad.sub(lse, pos)
    total = ad.reduce_sum(terms)
    return LossValue(value=float(total.value),
                     per_term=terms.value.ravel().copy(), node=total)


def sscl_loss(batch: ContrastiveBatchView) -> LossValue:
    """Self-supervised objective: the only positive is the augmented twin."""
    return _contrastive_core(batch, _pair_weights(batch))


def agcl_loss(batch: ContrastiveBatchView) -> LossValue:
    """Class-conditional objective over (modality, object) positives."""
    return _contrastive_core(batch, _positive_weights(batch))


# ---------------------------------------------------------------------------
# enumeration oracle: naive exp double loop, no stabilization

def oracle_contrastive(batch: ContrastiveBatchView, mode: str) -> LossValue:
    """Direct evaluation of the published objectives for small batches.

    Refuses similarity logits beyond +-30 rather than risking overflow;
    O(n^2) per anchor and float64 only.
    """
    if mode not in ("sscl", "agcl"):
        raise ValidationError(f"unknown oracle mode {mode!r}")
    batch.validate()
    emb = batch.embeddings.value if isinstance(batch.embeddings, ad.Var) \
        else np.asarray(batch.embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n > 64:
        raise StructuralError("oracle limited to 2N <= 64")
    t = batch.temperature
    rows = []
    for k in range(n):
        norm = math.sqrt(sum(float(v) ** 2 for v in emb[k]))
        rows.append([float(v) / norm for v in emb[k]])

    def logit(i, j):
        dot = sum(a * b for a, b in zip(rows[i], rows[j]))
        val = dot / t
        if abs(val) > ORACLE_LOGIT_LIMIT:
            raise RangeError(
                f"oracle logit {val:.3g} beyond safe naive-exp range")
        return val

    labels = np.asarray(batch.labels)
    visible = np.asarray(batch.visible, dtype=bool)
    pairing = np.asarray(batch.pairing)
    terms = []
    for k in range(n):
        denom = 0.0
        for j in range(n):
            if j != k:
                denom += math.exp(logit(k, j))
        if mode == "sscl":
            positives = [int(pairing[k])]
        else:
            positives = [
                l for l in range(n)
                if l != k and visible[k] and visible[l]
                and labels[l, 0] == labels[k, 0] and labels[l, 1] == labels[k, 1]
            ]
            if not positives:
                positives = [int(pairing[k])]
        acc = 0.0
        for l in positives:
            acc += math.log(math.exp(logit(k, l)) / denom)
        terms.append(-acc / len(positives))
    value = float(sum(terms))
    return LossValue(value=value, per_term=np.asarray(terms), node=None)
