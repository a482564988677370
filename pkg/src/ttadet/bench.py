"""Synthetic detection scenes, photometric corruptions and mAP evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter

from . import boxes as bx
from .errors import PlacementFailure
from .scene import Annotation, Detection, ToyScene

PLACEMENT_ATTEMPTS = 100

# (R, G, B) signature per class; shapes cycle through SHAPES
PALETTE = np.array([
    [0.9, 0.35, 0.3],
    [0.35, 0.85, 0.35],
    [0.3, 0.4, 0.9],
    [0.85, 0.8, 0.3],
    [0.8, 0.35, 0.85],
    [0.35, 0.8, 0.85],
])
SHAPES = ("square", "ring", "cross", "disc")


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=8)
    channels: int = Field(3, ge=1, le=3)
    num_classes: int = Field(3, ge=2, le=len(PALETTE))
    objects_min: int = Field(1, ge=1)
    objects_max: int = Field(3, ge=1)
    size_min: int = Field(6, ge=2)
    size_max: int = Field(10, ge=2)
    background_level: float = 0.1
    background_noise: float = Field(0.03, ge=0)
    intensity_jitter: float = Field(0.1, ge=0)
    max_overlap_iou: float = Field(0.0, ge=0, le=0.3)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        if self.objects_max < self.objects_min:
            raise ValueError("objects_max < objects_min")
        if self.size_max < self.size_min or self.size_max > self.image_size:
            raise ValueError("invalid object size range")
        return self


CorruptionKind = Literal["gaussian_noise", "contrast", "brightness", "blur", "pixel_dropout"]
CORRUPTION_KINDS: tuple[str, ...] = ("gaussian_noise", "contrast", "brightness", "blur", "pixel_dropout")

# index = severity; severity 0 is the identity
SEVERITY_TABLE = {
    "gaussian_noise": (0.0, 0.1, 0.2, 0.3, 0.38, 0.45),
    "contrast": (1.0, 0.75, 0.6, 0.45, 0.3, 0.2),
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "blur": (0.0, 0.5, 0.8, 1.1, 1.5, 2.0),
    "pixel_dropout": (0.0, 0.05, 0.1, 0.2, 0.3, 0.45),
}


class Corruption(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CorruptionKind
    severity: int = Field(..., ge=0, le=5)

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.severity}"


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "ring":
        t = max(1, min(w, h) // 4)
        return (xx < t) | (xx >= w - t) | (yy < t) | (yy >= h - t)
    if shape == "cross":
        tx, ty = max(1, w // 3), max(1, h // 3)
        x0, y0 = (w - tx) // 2, (h - ty) // 2
        return ((xx >= x0) & (xx < x0 + tx)) | ((yy >= y0) & (yy < y0 + ty))
    if shape == "disc":
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        return ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    raise ValueError(shape)


def _place(spec: SceneSpec, rng: np.random.Generator, count: int) -> list[tuple[int, int, int, int]]:
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            w, h = (int(v) for v in rng.integers(spec.size_min, spec.size_max + 1, size=2))
            x0 = int(rng.integers(0, spec.image_size - w + 1))
            y0 = int(rng.integers(0, spec.image_size - h + 1))
            if all(_compatible((x0, y0, w, h), other, spec.max_overlap_iou) for other in placed):
                placed.append((x0, y0, w, h))
                break
        else:
            raise PlacementFailure(f"could not place object {len(placed) + 1} of {count}")
    return placed


def _compatible(p, q, max_iou: float) -> bool:
    x0, y0, w, h = p
    a, b, c, d = q
    if max_iou == 0.0:
        return x0 + w <= a or a + c <= x0 or y0 + h <= b or b + d <= y0
    return bx.iou([x0 + w / 2, y0 + h / 2, w, h], [a + c / 2, b + d / 2, c, d]) <= max_iou


def render_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: int) -> tuple[ToyScene, list[Annotation]]:
    size = spec.image_size
    pixels = spec.background_level + spec.background_noise * rng.standard_normal((size, size, spec.channels))
    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    annotations = []
    for x0, y0, w, h in _place(spec, rng, count):
        cls = int(rng.integers(0, spec.num_classes))
        color = PALETTE[cls, :spec.channels] + spec.intensity_jitter * rng.uniform(-1, 1)
        mask = _shape_mask(SHAPES[cls % len(SHAPES)], w, h)
        region = pixels[y0:y0 + h, x0:x0 + w]
        region[mask] = color
        annotations.append(Annotation((x0 + w / 2, y0 + h / 2, w, h), cls))
    return ToyScene(pixels, scene_id), annotations


def scene_rng(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Counter-based generator for one named consumer and item index.

    Different ``stream`` names never share draws, so adding a consumer does
    not perturb the others.
    """
    key = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key, *index])))


def generate_dataset(spec: SceneSpec, n: int, offset: int = 0) -> list[tuple[ToyScene, list[Annotation]]]:
    """``n`` scenes with ids ``offset .. offset + n - 1``; each scene has its own seeded stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [render_scene(spec, scene_rng(spec.seed, "data", i), i) for i in range(offset, offset + n)]


def corrupt(scene: ToyScene, corruption: Corruption, rng: np.random.Generator) -> ToyScene:
    """Photometric corruption, clipped to the [0, 1] display range.

    Geometry and annotations are untouched.
    """
    x = scene.pixels.copy()
    level = SEVERITY_TABLE[corruption.kind][corruption.severity]
    if corruption.severity == 0:
        return ToyScene(x, scene.id)
    if corruption.kind == "gaussian_noise":
        x = x + level * rng.standard_normal(x.shape)
    elif corruption.kind == "contrast":
        mean = x.mean(axis=(0, 1), keepdims=True)
        x = mean + (x - mean) * level
    elif corruption.kind == "brightness":
        x = x + level
    elif corruption.kind == "blur":
        x = gaussian_filter(x, sigma=(level, level, 0), mode="nearest")
    elif corruption.kind == "pixel_dropout":
        drop = rng.random(x.shape[:2]) < level
        x[drop] = 0.0
    return ToyScene(np.clip(x, 0.0, 1.0), scene.id)


# ------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map: float
    tp: int
    fp: int
    fn: int


def match_scene(detections: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float) -> list[bool]:
    """TP flag per detection (input order).

    Detections are visited by descending score; each claims the unmatched
    same-class truth with the highest IoU at or above the threshold.
    """
    flags = [False] * len(detections)
    if not detections or not truths:
        return flags
    tboxes = np.array([t.box for t in truths])
    tcls = np.array([t.class_id for t in truths])
    dboxes = np.array([d.box for d in detections])
    ious = bx.iou_matrix(dboxes, tboxes)
    used = np.zeros(len(truths), dtype=bool)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    for i in order:
        cand = (tcls == detections[i].class_id) & ~used & (ious[i] >= iou_threshold)
        if cand.any():
            j = int(np.argmax(np.where(cand, ious[i], -1.0)))
            used[j] = True
            flags[i] = True
    return flags


def average_precision(scores: np.ndarray, tp: np.ndarray, n_truth: int) -> float:
    """Area under the all-point interpolated precision envelope."""
    if n_truth == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = np.concatenate([[0.0], ctp / n_truth, [1.0]])
    precision = np.concatenate([[0.0], ctp / (ctp + cfp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


@dataclass
class MapAccumulator:
    """Collects per-scene match flags so mAP over any prefix is exact and cheap.

    Matching inside one scene does not depend on other scenes, so the metric
    computed here equals a from-scratch ``evaluate_map`` on the same set.
    """

    iou_threshold: float = 0.5
    scores: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    truth_counts: dict = field(default_factory=dict)

    def add(self, detections: Sequence[Detection], truths: Sequence[Annotation]) -> None:
        flags = match_scene(detections, truths, self.iou_threshold)
        for det, hit in zip(detections, flags):
            self.scores.append(det.score)
            self.classes.append(det.class_id)
            self.hits.append(hit)
        for t in truths:
            self.truth_counts[t.class_id] = self.truth_counts.get(t.class_id, 0) + 1

    def result(self) -> EvalResult:
        scores = np.array(self.scores, dtype=float)
        classes = np.array(self.classes, dtype=int)
        hits = np.array(self.hits, dtype=bool)
        per_class = {}
        for cls in sorted(self.truth_counts):
            sel = classes == cls
            per_class[cls] = average_precision(scores[sel], hits[sel], self.truth_counts[cls])
        tp = int(hits.sum())
        n_truth = sum(self.truth_counts.values())
        m = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return EvalResult(per_class, m, tp, int(len(hits) - tp), n_truth - tp)


def evaluate_map(detections: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Annotation]],
                 iou_threshold: float = 0.5) -> EvalResult:
    """Per-class AP at one IoU threshold and their mean over classes present in the truth."""
    if len(detections) != len(truths):
        raise ValueError("detections and ground truth must cover the same scenes")
    acc = MapAccumulator(iou_threshold)
    for dets, gts in zip(detections, truths):
        acc.add(dets, gts)
    return acc.result()


def cumulative_curve(batch_detections: Sequence[Sequence[Sequence[Detection]]],
                     batch_truths: Sequence[Sequence[Sequence[Annotation]]],
                     iou_threshold: float = 0.5) -> list[tuple[int, float]]:
    """``(batch_index, mAP over batches 0..t)`` for every batch of a run."""
    if not batch_detections:
        raise ValueError("empty run log")
    acc = MapAccumulator(iou_threshold)
    curve = []
    for t, (dets, gts) in enumerate(zip(batch_detections, batch_truths)):
        for d, g in zip(dets, gts):
            acc.add(d, g)
        curve.append((t, acc.result().map))
    return curve


# ------------------------------------------------------------ persistence


def save_dataset(directory, spec: SceneSpec, data: Sequence[tuple[ToyScene, Sequence[Annotation]]]) -> None:
    """Manifest JSON, one ``<f8`` tensor file per scene and an annotations JSON."""
    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    entries, annotations = [], []
    for scene, anns in data:
        name = f"scenes/{scene.id:06d}.bin"
        (directory / name).write_bytes(scene.pixels.astype("<f8").tobytes())
        entries.append({"scene_id": scene.id, "file": name, "shape": list(scene.pixels.shape)})
        annotations.extend({"scene_id": scene.id, "box": list(a.box), "class_id": a.class_id} for a in anns)
    manifest = {"spec": spec.model_dump(), "seed": spec.seed, "n": len(data), "scenes": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (directory / "annotations.json").write_text(json.dumps(annotations, indent=1) + "\n")


def load_dataset(directory) -> tuple[SceneSpec, list[tuple[ToyScene, list[Annotation]]]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    by_scene: dict[int, list[Annotation]] = {}
    for a in json.loads((directory / "annotations.json").read_text()):
        by_scene.setdefault(a["scene_id"], []).append(Annotation(tuple(a["box"]), a["class_id"]))
    data = []
    for entry in manifest["scenes"]:
        px = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f8").reshape(entry["shape"])
        data.append((ToyScene(px, entry["scene_id"]), by_scene.get(entry["scene_id"], [])))
    return SceneSpec(**manifest["spec"]), data
