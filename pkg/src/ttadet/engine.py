"""Online adaptation loop: predict first, then adapt on the same batch.

Each batch is processed as follows.  The current student predicts on the raw
scenes and those detections are what gets evaluated.  Then for each inner
step: make weak/strong views, pseudo-label the weak views with the teacher,
run the student on the strong views, advance the target feature statistics
(first inner step only), combine self-training and alignment gradients,
take one SGD step on the backbone and refresh the EMA teacher.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .alignment import backprop_to_features, sym_kl, sym_kl_grad
from .bench import MapAccumulator, scene_rng
from .detector import (
    DetectorParams, add_grads, backward, ema_update, forward, resolve_scope, sgd_momentum_step,
)
from .errors import DimMismatch
from .scene import Annotation, Detection, ToyScene
from .selftrain import AugmentConfig, PseudoLabelConfig, augment_pair, pseudo_label, st_upstream, to_strong_view
from .source import SourceStats
from .stats import GaussianStats, StreamConfig, default_jitter, pool_foreground, pool_global, regularize, update_streaming

CSV_COLUMNS = ("batch_index", "l_st_cls", "l_st_reg", "l_al_f", "l_al_a", "sym_kl_f", "sym_kl_a", "n_pseudo", "cum_map")


class TtaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_st_cls: float = Field(1.0, ge=0)
    lambda_st_reg: float = Field(1.0, ge=0)
    lambda_al_f: float = Field(0.1, ge=0)
    lambda_al_a: float = Field(0.01, ge=0)
    gamma: float = Field(1.0 / 64, gt=0, lt=1)
    jitter: Optional[float] = Field(None, gt=0)
    steps_per_batch: int = Field(2, ge=1)
    lr: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta: float = Field(0.999, ge=0, le=1)
    batch_size: int = Field(8, ge=1)
    self_training: bool = True
    global_align: bool = True
    foreground_align: bool = True
    scope: Literal["backbone", "all"] = "backbone"
    inference_model: Literal["student", "teacher"] = "student"
    align_view: Literal["strong", "weak"] = "strong"

    @model_validator(mode="after")
    def _rate(self):
        if self.gamma * self.batch_size >= 1.0:
            raise ValueError(f"gamma * batch_size = {self.gamma * self.batch_size} must be < 1")
        return self

    @property
    def adapts(self) -> bool:
        return self.self_training or self.global_align or self.foreground_align

    def stream_config(self, cov: Optional[np.ndarray] = None) -> StreamConfig:
        eps = self.jitter if self.jitter is not None else (default_jitter(cov) if cov is not None else 1e-6)
        return StreamConfig(gamma=self.gamma, epsilon_jitter=eps)


PRESETS = {
    "direct-test": dict(self_training=False, global_align=False, foreground_align=False),
    "st": dict(self_training=True, global_align=False, foreground_align=False),
    "align": dict(self_training=False, global_align=True, foreground_align=False),
    "st+global": dict(self_training=True, global_align=True, foreground_align=False),
    "stfar": dict(self_training=True, global_align=True, foreground_align=True),
}


def with_preset(cfg: TtaConfig, name: str) -> TtaConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.model_copy(update=PRESETS[name])


@dataclass(frozen=True)
class TtaState:
    student: DetectorParams
    teacher: DetectorParams
    velocity: dict
    target_global: GaussianStats
    target_fg: GaussianStats
    batch_counter: int = 0


@dataclass
class BatchRecord:
    batch_index: int
    detections: list[list[Detection]]
    l_st_cls: float = 0.0
    l_st_reg: float = 0.0
    l_al_f: float = 0.0
    l_al_a: float = 0.0
    sym_kl_f: float = 0.0
    sym_kl_a: float = 0.0
    n_pseudo: int = 0
    updated: bool = False
    cum_map: float = float("nan")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass
class RunLog:
    records: list[BatchRecord] = field(default_factory=list)
    final_state: Optional[TtaState] = None

    def append(self, record: BatchRecord) -> None:
        self.records.append(record)

    @property
    def final_map(self) -> float:
        return self.records[-1].cum_map if self.records else float("nan")

    def curve(self) -> list[tuple[int, float]]:
        return [(r.batch_index, r.cum_map) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "batches": len(self.records),
            "final_map": self.final_map,
            "peak_map": max((r.cum_map for r in self.records), default=float("nan")),
            "updates": sum(r.updated for r in self.records),
            "pseudo_labels": sum(r.n_pseudo for r in self.records),
        }


def init_state(source_params: DetectorParams, source: SourceStats, cfg: TtaConfig) -> TtaState:
    model = source_params.config
    if source.global_stats.dim != model.feature_channels:
        raise DimMismatch(f"global stats dim {source.global_stats.dim} != C = {model.feature_channels}")
    if source.foreground_stats.dim != model.roi_dim:
        raise DimMismatch(f"foreground stats dim {source.foreground_stats.dim} != D = {model.roi_dim}")
    return TtaState(
        student=source_params,
        teacher=source_params,
        velocity={},
        target_global=source.global_stats,
        target_fg=source.foreground_stats,
    )


@dataclass
class _AlignTerm:
    loss: float
    divergence: float
    rows: np.ndarray
    post: GaussianStats


def _align(source: GaussianStats, pre: GaussianStats, feats: Sequence[np.ndarray], weight: float,
           cfg: TtaConfig) -> _AlignTerm:
    stream = cfg.stream_config(source.cov)
    post = update_streaming(pre, feats, stream)
    post_reg = regularize(post, stream.epsilon_jitter)
    src_reg = regularize(source, stream.epsilon_jitter)
    div = sym_kl(src_reg, post_reg)
    rows = backprop_to_features(sym_kl_grad(src_reg, post_reg), feats, pre, stream)
    return _AlignTerm(weight * div, div, weight * rows, post)


def process_batch(state: TtaState, batch: Sequence[ToyScene], source: SourceStats, cfg: TtaConfig,
                  pseudo_cfg: PseudoLabelConfig = PseudoLabelConfig(),
                  augment_cfg: AugmentConfig = AugmentConfig(), seed: int = 0):
    """Predict on ``batch`` with the current model, then adapt on it.

    Returns ``(detections, new_state, record)``.
    """
    model_for_inference = state.student if cfg.inference_model == "student" else state.teacher
    detections = forward(model_for_inference, list(batch), mode="infer").detections
    record = BatchRecord(state.batch_counter, detections)
    if not cfg.adapts:
        return detections, replace(state, batch_counter=state.batch_counter + 1), record

    student, teacher, velocity = state.student, state.teacher, state.velocity
    pre_global, pre_fg = state.target_global, state.target_fg
    target_global, target_fg = pre_global, pre_fg
    scope = resolve_scope(cfg.scope)
    for step in range(cfg.steps_per_batch):
        pairs = [augment_pair(s, scene_rng(seed, "augment", s.id, step), augment_cfg) for s in batch]
        views = {"strong": [p.strong.scene for p in pairs], "weak": [p.weak.scene for p in pairs]}
        traces: dict = {}
        upstream: dict = {"strong": {}, "weak": {}}

        def trace_of(view):
            if view not in traces:
                traces[view] = forward(student, views[view], mode="train")
            return traces[view]

        n_pseudo = 0
        l_cls = l_reg = 0.0
        if cfg.self_training:
            pseudo = pseudo_label(teacher, views["weak"], pseudo_cfg)
            targets = [to_strong_view(ps, pair) for ps, pair in zip(pseudo, pairs)]
            n_pseudo = sum(len(t) for t in targets)
            if n_pseudo:
                l_cls, l_reg, upstream["strong"] = st_upstream(
                    trace_of("strong"), targets, cfg.lambda_st_cls, cfg.lambda_st_reg)

        trace = trace_of(cfg.align_view) if (cfg.global_align or cfg.foreground_align) else None
        up = upstream[cfg.align_view]
        if cfg.global_align:
            feats = [pool_global(trace.feature_map[b]) for b in range(trace.batch_size)]
            term = _align(source.global_stats, pre_global, feats, cfg.lambda_al_f, cfg)
            spread = term.rows[:, None, None, :] / trace.config.grid ** 2
            up["fmap"] = np.broadcast_to(spread, trace.feature_map.shape).copy()
            if step == 0:
                target_global = term.post
                record.l_al_f, record.sym_kl_f = term.loss, term.divergence

        if cfg.foreground_align:
            kept = [b for b in range(trace.batch_size) if trace.fg_mask[b].any()]
            if kept:
                feats = [pool_foreground(trace.foreground_features(b)) for b in kept]
                term = _align(source.foreground_stats, pre_fg, feats, cfg.lambda_al_a, cfg)
                d_roi = np.zeros_like(trace.roi_features)
                for row, b in zip(term.rows, kept):
                    mask = trace.fg_mask[b]
                    d_roi[b][mask] = row / mask.sum()
                up["roi"] = d_roi
                if step == 0:
                    target_fg = term.post
                    record.l_al_a, record.sym_kl_a = term.loss, term.divergence

        if step == 0:
            record.l_st_cls, record.l_st_reg, record.n_pseudo = l_cls, l_reg, n_pseudo
        grads = None
        for view in ("strong", "weak"):
            if upstream[view]:
                g = backward(student, traces[view], upstream[view])
                grads = g if grads is None else add_grads(grads, g)
        if grads is None or not any(np.any(grads[n]) for n in scope):
            continue
        student, velocity = sgd_momentum_step(student, grads, cfg.lr, cfg.momentum, velocity, scope=cfg.scope)
        teacher = ema_update(teacher, student, cfg.beta)
        record.updated = True

    new_state = TtaState(student, teacher, velocity, target_global, target_fg, state.batch_counter + 1)
    return detections, new_state, record


def run_stream(source_params: DetectorParams, source: SourceStats,
               stream: Sequence[tuple[ToyScene, Sequence[Annotation]]], cfg: TtaConfig,
               seed: int, pseudo_cfg: PseudoLabelConfig = PseudoLabelConfig(),
               augment_cfg: AugmentConfig = AugmentConfig(), iou_threshold: float = 0.5) -> RunLog:
    """Single ordered pass over ``stream``.

    Annotations are consumed only by the evaluator to fill ``cum_map``.
    """
    if not stream:
        raise ValueError("stream is empty")
    state = init_state(source_params, source, cfg)
    log = RunLog()
    acc = MapAccumulator(iou_threshold)
    for start in range(0, len(stream), cfg.batch_size):
        chunk = stream[start:start + cfg.batch_size]
        detections, state, record = process_batch(
            state, [s for s, _ in chunk], source, cfg, pseudo_cfg, augment_cfg, seed)
        for dets, (_, truth) in zip(detections, chunk):
            acc.add(dets, truth)
        record.cum_map = acc.result().map
        log.append(record)
    log.final_state = state
    return log
