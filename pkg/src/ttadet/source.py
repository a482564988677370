"""Source-domain side: supervised pretraining and offline feature statistics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .bench import evaluate_map, scene_rng
from .detector import DetectorParams, ModelConfig, forward, sgd_momentum_step, supervised_loss_and_grads
from .scene import Annotation, ToyScene
from .stats import GaussianStats, fit_source, pool_foreground, pool_global

log = logging.getLogger(__name__)


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_train: int = Field(2000, ge=2)
    n_val: int = Field(300, ge=1)
    epochs: int = Field(12, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    lr_decay_epochs: tuple[int, ...] = (8, 11)
    map_floor: float = Field(0.85, ge=0, le=1)


def predict(params: DetectorParams, scenes: Sequence[ToyScene], batch_size: int = 64):
    out = []
    for i in range(0, len(scenes), batch_size):
        out.extend(forward(params, scenes[i:i + batch_size], mode="infer").detections)
    return out


def pretrain(model: ModelConfig, data: Sequence[tuple[ToyScene, list[Annotation]]],
             cfg: PretrainConfig, seed: int) -> DetectorParams:
    """Plain supervised training with SGD + momentum on every parameter."""
    params = DetectorParams.init(model, scene_rng(seed, "init", 0))
    state: dict = {}
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.1 ** sum(epoch >= e for e in cfg.lr_decay_epochs)
        order = scene_rng(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scenes = [data[i][0] for i in idx]
            targets = [data[i][1] for i in idx]
            losses, grads = supervised_loss_and_grads(params, scenes, targets)
            params, state = sgd_momentum_step(params, grads, lr, cfg.momentum, state, scope="all")
            total += sum(losses.values()) * len(idx)
        log.info("pretrain epoch %d lr %.4g loss %.4f", epoch, lr, total / n)
    return params


def clean_map(params: DetectorParams, data: Sequence[tuple[ToyScene, list[Annotation]]]) -> float:
    dets = predict(params, [s for s, _ in data])
    return evaluate_map(dets, [a for _, a in data]).map


@dataclass(frozen=True)
class SourceStats:
    global_stats: GaussianStats
    foreground_stats: GaussianStats


def pooled_features(params: DetectorParams, scenes: Sequence[ToyScene], batch_size: int = 64):
    """Per-image global vectors and (where any proposal survives) foreground vectors."""
    glob, fg = [], []
    for i in range(0, len(scenes), batch_size):
        trace = forward(params, scenes[i:i + batch_size], mode="infer")
        for b in range(trace.batch_size):
            glob.append(pool_global(trace.feature_map[b]))
            v = pool_foreground(trace.foreground_features(b))
            if v is not None:
                fg.append(v)
    return glob, fg


def fit_source_stats(params: DetectorParams, scenes: Sequence[ToyScene]) -> SourceStats:
    glob, fg = pooled_features(params, scenes)
    return SourceStats(fit_source(glob), fit_source(fg))
