"""End-to-end runs: synthesize data, train both stages, evaluate.

The ablation command and the trend benchmarks all funnel through
run_pipeline so a grid point is a pure function of (config, loss kind).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .metrics import cluster_separation, dice_score, miou
from .network import ModelParams, embed_views
from .patches import extract_query_patches
from .phantom import _derive_seed, build_dataset
from .runconfig import EvalConfig, RunConfig
from .training import finetune_stage2, infer_segmentation, pretrain_stage1

TRAIN_STREAM = 31
TEST_STREAM = 32
EVAL_POOL_STREAM = 41


@dataclass
class EvalMetrics:
    dice_per_object: np.ndarray
    dice_mean: float
    miou: float
    silhouette: float
    embeddings: np.ndarray
    embedding_labels: np.ndarray
    embedding_sample_ids: np.ndarray
    wall_clock_s: float


@dataclass
class PipelineResult:
    loss_kind: str
    params: ModelParams
    history1: object
    history2: object
    metrics: EvalMetrics


def synth_split(cfg: RunConfig, n_samples: int, stream: int):
    return build_dataset(cfg.phantom, n_samples, cfg.eval.quality,
                         _derive_seed(cfg.seed, stream))


def embedding_pool(samples: list, params: ModelParams, n_per_object: int,
                   seed: int):
    """Un-augmented patch embeddings with (modality, object) labels."""
    pool = []
    for i, sample in enumerate(samples):
        pool.extend(extract_query_patches(
            sample, sample.attention, n_per_object,
            params.config.patch_size, _derive_seed(seed, EVAL_POOL_STREAM, i)))
    views = np.stack([q.a for q in pool])
    chunks = [embed_views(params, views[s:s + 64])
              for s in range(0, len(views), 64)]
    embeddings = np.concatenate(chunks, axis=0)
    labels = np.asarray([(q.modality, q.object_id) for q in pool])
    sample_ids = np.asarray([q.sample_id for q in pool])
    return embeddings, labels, sample_ids


def evaluate_params(samples: list, params: ModelParams,
                    eval_cfg: EvalConfig | None = None,
                    n_per_object: int = 8, seed: int = 0) -> EvalMetrics:
    """Inference metrics plus embedding separation on a sample list."""
    started = time.perf_counter()
    eval_cfg = eval_cfg or EvalConfig()
    stride = eval_cfg.stride or params.config.patch_size // 2
    per_object = []
    mious = []
    for sample in samples:
        pred = infer_segmentation(sample, sample.attention, params,
                                  stride=stride, threshold=eval_cfg.threshold)
        per_object.append(dice_score(pred, sample.gt_masks))
        mious.append(miou(pred, sample.gt_masks))
    if not per_object:
        raise ValueError("cannot evaluate an empty sample list")
    dice_per_object = np.mean(np.stack(per_object), axis=0)

    embeddings, labels, sample_ids = embedding_pool(
        samples, params, n_per_object, seed)
    silhouette = cluster_separation(embeddings, labels)
    return EvalMetrics(
        dice_per_object=dice_per_object,
        dice_mean=float(dice_per_object.mean()),
        miou=float(np.mean(mious)),
        silhouette=silhouette,
        embeddings=embeddings,
        embedding_labels=labels,
        embedding_sample_ids=sample_ids,
        wall_clock_s=time.perf_counter() - started)


def run_pipeline(cfg: RunConfig, loss_kind: str | None = None) -> PipelineResult:
    """Synthesize train/test splits, run both stages, evaluate on test."""
    if loss_kind is not None:
        cfg = replace(cfg, stage1=replace(cfg.stage1, loss=loss_kind))
    train_cfg = cfg.train_config()
    train_samples, _ = synth_split(cfg, cfg.eval.n_train, TRAIN_STREAM)
    test_samples, _ = synth_split(cfg, cfg.eval.n_test, TEST_STREAM)
    params1, history1 = pretrain_stage1(
        train_samples, train_cfg, n_objects=cfg.phantom.n_objects,
        n_modalities=cfg.phantom.n_modalities)
    params2, history2 = finetune_stage2(train_samples, params1, train_cfg)
    metrics = evaluate_params(test_samples, params2, eval_cfg=cfg.eval,
                              n_per_object=cfg.sampling_n_per_object,
                              seed=cfg.seed)
    return PipelineResult(loss_kind=cfg.stage1.loss, params=params2,
                          history1=history1, history2=history2,
                          metrics=metrics)
