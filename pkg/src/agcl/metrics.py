"""Evaluation metrics: overlap scores, cluster separation, PCA export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, ValidationError


def dice_score(pred_labels: np.ndarray, gt_masks: list) -> np.ndarray:
    """Per-object Dice between a fused label map and binary gt masks.

    Object o occupies label value o+1 in the map; empty-vs-empty is 1.
    """
    pred_labels = np.asarray(pred_labels)
    scores = np.zeros(len(gt_masks))
    for o, gt in enumerate(gt_masks):
        gt = np.asarray(gt).astype(bool)
        if gt.shape != pred_labels.shape:
            raise StructuralError(
                f"mask shape {gt.shape} != prediction shape {pred_labels.shape}")
        pred = pred_labels == (o + 1)
        union = pred.sum() + gt.sum()
        if union == 0:
            scores[o] = 1.0
        else:
            scores[o] = 2.0 * np.logical_and(pred, gt).sum() / union
    return scores


def miou(pred_labels: np.ndarray, gt_masks: list) -> float:
    """Mean intersection-over-union across object classes; empty-empty is 1."""
    pred_labels = np.asarray(pred_labels)
    ious = []
    for o, gt in enumerate(gt_masks):
        gt = np.asarray(gt).astype(bool)
        if gt.shape != pred_labels.shape:
            raise StructuralError(
                f"mask shape {gt.shape} != prediction shape {pred_labels.shape}")
        pred = pred_labels == (o + 1)
        union = np.logical_or(pred, gt).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.logical_and(pred, gt).sum() / union)
    return float(np.mean(ious))


def cluster_separation(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over (modality, object) clusters.

    Embeddings are unit-normalized first; distances are Euclidean. A
    point with a(i) = b(i) = 0 contributes 0. Requires at least two
    clusters, each with at least two members.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or labels.shape[0] != emb.shape[0]:
        raise StructuralError("embeddings (n, d) and labels (n, ...) disagree")
    if labels.ndim == 1:
        labels = labels[:, None]
    keys = [tuple(row) for row in labels]
    uniq = sorted(set(keys))
    if len(uniq) < 2:
        raise ValidationError("silhouette needs at least two clusters")
    cluster_of = np.asarray([uniq.index(k) for k in keys])
    counts = np.bincount(cluster_of, minlength=len(uniq))
    if counts.min() < 2:
        raise ValidationError("every cluster needs at least two members")

    norms = np.sqrt((emb ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= 1e-12):
        raise ValidationError("zero embedding cannot be normalized")
    unit = emb / norms
    d2 = ((unit[:, None, :] - unit[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(np.maximum(d2, 0.0))

    n = emb.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        own = cluster_of == cluster_of[i]
        a = dist[i, own].sum() / (counts[cluster_of[i]] - 1)
        b = min(dist[i, cluster_of == c].mean()
                for c in range(len(uniq)) if c != cluster_of[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


@dataclass
class PcaResult:
    coords: np.ndarray       # (n, k_effective) centred projections
    ratios: np.ndarray       # explained-variance ratios, non-increasing
    components: np.ndarray   # (k_effective, d) orthonormal rows
    requested: int
    rank_deficient: bool


def pca_project(embeddings: np.ndarray, k: int = 2) -> PcaResult:
    """Principal-component projection via SVD of the centred matrix.

    Returns fewer components than requested (flagged) when the data rank
    is below k.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise StructuralError("embeddings must be 2-d")
    n, d = emb.shape
    if n <= k:
        raise ValidationError(f"need more than k={k} points, got {n}")
    centred = emb - emb.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    total = float((s ** 2).sum())
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    k_eff = min(k, rank)
    ratios = (s[:k_eff] ** 2) / total if total > 0 else np.zeros(k_eff)
    components = vt[:k_eff]
    return PcaResult(coords=centred @ components.T, ratios=ratios,
                     components=components, requested=k,
                     rank_deficient=k_eff < k)
