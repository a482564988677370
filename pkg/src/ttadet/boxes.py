"""Box geometry on ``(cx, cy, w, h)`` boxes."""
from __future__ import annotations

import numpy as np

# caps exp() in decode at roughly a 60x size change
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:4] / 2.0
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    wh = c[..., 2:4] - c[..., 0:2]
    return np.concatenate([c[..., 0:2] + wh / 2.0, wh], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    ca = to_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cb = to_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    area_a = np.prod(ca[:, 2:] - ca[:, :2], axis=-1)
    area_b = np.prod(cb[:, 2:] - cb[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def encode(reference: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Center-offset / log-size deltas taking ``reference`` onto ``target``."""
    r = np.asarray(reference, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return np.concatenate(
        [(t[..., 0:2] - r[..., 0:2]) / r[..., 2:4], np.log(t[..., 2:4] / r[..., 2:4])], axis=-1
    )


def decode(reference: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    r = np.asarray(reference, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    scale = np.exp(np.clip(d[..., 2:4], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.concatenate([r[..., 0:2] + d[..., 0:2] * r[..., 2:4], r[..., 2:4] * scale], axis=-1)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1e-3) -> np.ndarray:
    c = to_corners(boxes)
    c[..., 0::2] = np.clip(c[..., 0::2], 0.0, width)
    c[..., 1::2] = np.clip(c[..., 1::2], 0.0, height)
    c[..., 2:4] = np.maximum(c[..., 2:4], c[..., 0:2] + min_size)
    return from_corners(c)


def greedy_nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    """Indices kept by score-ordered greedy suppression (ties keep lower index)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    for idx in order:
        if all(ious[idx, k] < threshold for k in keep):
            keep.append(int(idx))
    return keep
