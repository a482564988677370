"""Value types for scenes, annotations and detections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyScene:
    pixels: np.ndarray
    id: int

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ValueError(f"scene pixels must be H x W x C, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("scene pixels must be finite")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Annotation:
    box: tuple[float, float, float, float]
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "class_id", int(self.class_id))

    def validate(self, width: float, height: float) -> None:
        cx, cy, w, h = self.box
        if not (0 < w <= width and 0 < h <= height):
            raise ValueError(f"box size out of range: {self.box}")
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f"box center outside scene: {self.box}")


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
