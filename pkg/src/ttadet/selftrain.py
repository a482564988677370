"""Weak/strong views, teacher pseudo labels and the self-training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import map_coordinates

from . import boxes as bx
from .detector import DetectorParams, ForwardTrace, backward, forward, supervised_upstream
from .scene import Annotation, ToyScene

PIXEL_RANGE = (-1.0, 2.0)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    flip_prob: float = Field(0.5, ge=0, le=1)
    scale_low: float = Field(0.9, gt=0)
    scale_high: float = Field(1.1, gt=0)
    noise_sigma: float = Field(0.1, ge=0)
    brightness: float = Field(0.2, ge=0)
    contrast_low: float = Field(0.8, gt=0)
    contrast_high: float = Field(1.25, gt=0)
    max_erase_patches: int = Field(2, ge=0)
    max_erase_fraction: float = Field(0.2, ge=0, le=1)
    erase_value: float = 0.5


class PseudoLabelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(0.5, gt=0, lt=1)


@dataclass(frozen=True)
class ViewTransform:
    """Horizontal flip and isotropic scaling about the scene centre."""

    flip: bool
    scale: float
    width: float
    height: float

    def apply_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        cx, cy = self.width / 2.0, self.height / 2.0
        b[:, 0] = cx + (b[:, 0] - cx) * self.scale
        b[:, 1] = cy + (b[:, 1] - cy) * self.scale
        b[:, 2:] *= self.scale
        if self.flip:
            b[:, 0] = self.width - b[:, 0]
        return b

    def invert_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        if self.flip:
            b[:, 0] = self.width - b[:, 0]
        cx, cy = self.width / 2.0, self.height / 2.0
        b[:, 0] = cx + (b[:, 0] - cx) / self.scale
        b[:, 1] = cy + (b[:, 1] - cy) / self.scale
        b[:, 2:] /= self.scale
        return b

    def apply_pixels(self, pixels: np.ndarray) -> np.ndarray:
        h, w = pixels.shape[:2]
        if not self.flip and self.scale == 1.0:
            return pixels.copy()
        u = np.arange(w) + 0.5
        v = np.arange(h) + 0.5
        if self.flip:
            u = self.width - u
        xs = self.width / 2.0 + (u - self.width / 2.0) / self.scale - 0.5
        ys = self.height / 2.0 + (v - self.height / 2.0) / self.scale - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack(
            [map_coordinates(pixels[..., c], [yy, xx], order=1, mode="nearest") for c in range(pixels.shape[2])],
            axis=-1,
        )


@dataclass(frozen=True)
class AugmentedView:
    scene: ToyScene
    transform: ViewTransform


@dataclass(frozen=True)
class AugmentedPair:
    weak: AugmentedView
    strong: AugmentedView

    def weak_to_strong(self, boxes: np.ndarray) -> np.ndarray:
        original = self.weak.transform.invert_boxes(boxes)
        s = self.strong.scene
        return bx.clip_boxes(self.strong.transform.apply_boxes(original), s.width, s.height)


def sample_transform(scene: ToyScene, rng: np.random.Generator, cfg: AugmentConfig) -> ViewTransform:
    flip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(cfg.scale_low, cfg.scale_high))
    return ViewTransform(flip, scale, float(scene.width), float(scene.height))


def weak_augment(scene: ToyScene, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentedView:
    """Random flip and scale jitter, resampled back to the scene grid."""
    t = sample_transform(scene, rng, cfg)
    return AugmentedView(ToyScene(t.apply_pixels(scene.pixels), scene.id), t)


def strong_augment(scene: ToyScene, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentedView:
    """Weak geometry plus pixel noise, brightness/contrast jitter and patch erasing."""
    view = weak_augment(scene, rng, cfg)
    x = np.array(view.scene.pixels)
    h, w = x.shape[:2]
    x = x + cfg.noise_sigma * rng.standard_normal(x.shape)
    x = x + rng.uniform(-cfg.brightness, cfg.brightness)
    factor = np.exp(rng.uniform(np.log(cfg.contrast_low), np.log(cfg.contrast_high)))
    mean = x.mean(axis=(0, 1), keepdims=True)
    x = mean + (x - mean) * factor
    for _ in range(int(rng.integers(0, cfg.max_erase_patches + 1))):
        pw, ph = erase_patch_size(rng, w, h, cfg.max_erase_fraction)
        if pw == 0 or ph == 0:
            continue
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        x[y0:y0 + ph, x0:x0 + pw] = cfg.erase_value
    return AugmentedView(ToyScene(np.clip(x, *PIXEL_RANGE), scene.id), view.transform)


def erase_patch_size(rng: np.random.Generator, w: int, h: int, max_fraction: float) -> tuple[int, int]:
    """Patch width/height whose area never exceeds ``max_fraction`` of the scene."""
    budget = max_fraction * w * h
    pw = int(rng.integers(1, max(2, int(np.sqrt(budget)) + 1)))
    ph_max = min(h, int(budget // pw))
    if ph_max < 1:
        return 0, 0
    return pw, int(rng.integers(1, ph_max + 1))


def augment_pair(scene: ToyScene, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    return AugmentedPair(weak_augment(scene, rng, cfg), strong_augment(scene, rng, cfg))


@dataclass(frozen=True)
class PseudoLabelSet:
    items: tuple[tuple[tuple[float, float, float, float], int, float], ...]
    source_scene_id: int

    def __len__(self) -> int:
        return len(self.items)

    def annotations(self) -> list[Annotation]:
        return [Annotation(box, cls) for box, cls, _ in self.items]


def pseudo_label(teacher: DetectorParams, weak: Sequence[ToyScene] | ToyScene,
                 cfg: PseudoLabelConfig = PseudoLabelConfig()) -> list[PseudoLabelSet]:
    """Teacher detections on the weak views that clear the confidence threshold."""
    scenes = [weak] if isinstance(weak, ToyScene) else list(weak)
    trace = forward(teacher, scenes, mode="infer")
    out = []
    for scene, dets in zip(scenes, trace.detections):
        kept = tuple((d.box, d.class_id, d.score) for d in dets if d.score >= cfg.tau)
        out.append(PseudoLabelSet(kept, scene.id))
    return out


def to_strong_view(pseudo: PseudoLabelSet, pair: AugmentedPair) -> list[Annotation]:
    if not len(pseudo):
        return []
    boxes = pair.weak_to_strong(np.array([box for box, _, _ in pseudo.items]))
    return [Annotation(tuple(b), cls) for b, (_, cls, _) in zip(boxes, pseudo.items)]


def st_upstream(trace: ForwardTrace, targets: Sequence[Sequence[Annotation]],
                cls_weight: float = 1.0, reg_weight: float = 1.0) -> tuple[float, float, dict]:
    """Unweighted ``(L_cls, L_reg)`` and the weighted upstream gradients.

    ``L_cls`` is objectness BCE plus ROI cross-entropy, ``L_reg`` the two
    smooth-L1 box terms.
    """
    losses, up = supervised_upstream(trace, targets)
    for key in ("obj", "cls"):
        up[key] *= cls_weight
    for key in ("rpn", "reg"):
        up[key] *= reg_weight
    l_cls = losses["obj"] + losses["roi_cls"]
    l_reg = losses["rpn_reg"] + losses["roi_reg"]
    return l_cls, l_reg, up


def st_losses(student: DetectorParams, strong: Sequence[ToyScene] | ToyScene,
              targets: Sequence[Sequence[Annotation]] | Sequence[Annotation]):
    """Self-training losses on the strong views; targets already mapped into those views."""
    scenes = [strong] if isinstance(strong, ToyScene) else list(strong)
    if isinstance(strong, ToyScene):
        targets = [targets]
    trace = forward(student, scenes, mode="train")
    l_cls, l_reg, up = st_upstream(trace, targets)
    return l_cls, l_reg, backward(student, trace, up)
