"""Experiment manifest and the data/run wiring shared by the CLI and tests.

Data identity lives in the config: the source scenes come from
``scene.seed`` and the test stream from ``stream.seed``.  The run seed only
drives weight init, shuffling and augmentation, so a direct-test run gives
the same numbers under every seed.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bench import Corruption, SceneSpec, corrupt, generate_dataset, scene_rng
from .detector import DetectorParams, ModelConfig
from .engine import RunLog, TtaConfig, run_stream, with_preset
from .errors import TtaDetError
from .scene import Annotation, ToyScene
from .selftrain import AugmentConfig, PseudoLabelConfig
from .source import PretrainConfig, SourceStats

VAL_OFFSET = 1_000_000

# desk-scale adaptation settings; TtaConfig() itself keeps the reference defaults
DESK_TTA = TtaConfig(lr=1e-3, lambda_al_f=1.0, lambda_al_a=0.1, jitter=0.01, align_view="weak")


class ConfigError(TtaDetError, ValueError):
    """Invalid experiment configuration; the message names the key path."""


class StreamSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_scenes: int = Field(800, ge=1)
    seed: int = 1000
    id_offset: int = Field(2_000_000, ge=0)
    corruptions: tuple[Corruption, ...] = (Corruption(kind="gaussian_noise", severity=5),)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scene: SceneSpec = SceneSpec()
    model: ModelConfig = ModelConfig()
    pretrain: PretrainConfig = PretrainConfig()
    stats_scenes: Optional[int] = Field(None, ge=2)
    tta: TtaConfig = DESK_TTA
    pseudo: PseudoLabelConfig = PseudoLabelConfig()
    augment: AugmentConfig = AugmentConfig()
    stream: StreamSpec = StreamSpec()
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_iou: float = Field(0.5, gt=0, le=1)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _consistent(self):
        if self.scene.image_size != self.model.image_size:
            raise ValueError("scene.image_size must equal model.image_size")
        if self.scene.channels != self.model.in_channels:
            raise ValueError("scene.channels must equal model.in_channels")
        if self.scene.num_classes != self.model.num_classes:
            raise ValueError("scene.num_classes must equal model.num_classes")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override in place; values parse as JSON when they can."""
    path, sep, raw = assignment.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    keys = path.split(".")
    node: Any = doc
    for depth, key in enumerate(keys[:-1]):
        if isinstance(node, list):
            node = node[int(key)]
            continue
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif not isinstance(child, (dict, list)):
            raise ConfigError(f"{'.'.join(keys[:depth + 1])}: cannot descend into a scalar")
        node = child
    if isinstance(node, list):
        node[int(keys[-1])] = _coerce(raw)
    else:
        node[keys[-1]] = _coerce(raw)


def _error_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def build_config(doc: dict, overrides: Sequence[str] = ()) -> ExperimentConfig:
    doc = json.loads(json.dumps(doc))
    for assignment in overrides:
        apply_override(doc, assignment)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_error_path(first)}: {first['msg']}") from exc


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: malformed JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return build_config(doc, overrides)


def source_data(cfg: ExperimentConfig) -> list[tuple[ToyScene, list[Annotation]]]:
    return generate_dataset(cfg.scene, cfg.pretrain.n_train)


def validation_data(cfg: ExperimentConfig) -> list[tuple[ToyScene, list[Annotation]]]:
    return generate_dataset(cfg.scene, cfg.pretrain.n_val, offset=VAL_OFFSET)


def stats_scenes(cfg: ExperimentConfig) -> list[ToyScene]:
    n = cfg.stats_scenes or cfg.pretrain.n_train
    return [s for s, _ in generate_dataset(cfg.scene, n)]


def stream_data(cfg: ExperimentConfig, corruption: Optional[Corruption]):
    """The ordered test stream; ``corruption=None`` (or severity 0) leaves it clean."""
    spec = cfg.scene.model_copy(update={"seed": cfg.stream.seed})
    clean = generate_dataset(spec, cfg.stream.n_scenes, offset=cfg.stream.id_offset)
    if corruption is None or corruption.severity == 0:
        return clean
    return [(corrupt(s, corruption, scene_rng(cfg.stream.seed, "corrupt", s.id)), a) for s, a in clean]


def run_preset(params: DetectorParams, stats: SourceStats, stream, cfg: ExperimentConfig,
               preset: str, seed: int) -> RunLog:
    tta = with_preset(cfg.tta, preset)
    return run_stream(params, stats, stream, tta, seed, pseudo_cfg=cfg.pseudo,
                      augment_cfg=cfg.augment, iou_threshold=cfg.eval_iou)
