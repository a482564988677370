"""A small two-stage detector with hand-written forward and backward passes.

Pipeline: patch-embedding layer -> 3x3 conv over the cell grid (the
backbone, producing an ``H x W x C`` feature map) -> per-cell objectness and
box offsets (proposal scorer) -> top-k cells -> 3x3 neighbourhood features
projected to ``D`` dims (ROI features) -> classification (K + background)
and box-regression heads.

Everything is batched over scenes; ``forward`` on a single scene is a batch
of one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import boxes as bx
from .errors import NoProposals, ShapeMismatch
from .scene import Annotation, Detection, ToyScene

BACKBONE = ("conv1_w", "conv1_b", "conv2_w", "conv2_b")
PARAM_ORDER = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "obj_w", "obj_b", "rpn_w", "rpn_b",
    "roi_w", "roi_b", "cls_w", "cls_b", "reg_w", "reg_b",
)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=4)
    in_channels: int = Field(3, ge=1)
    patch: int = Field(4, ge=1)
    hidden_channels: int = Field(64, ge=1)
    feature_channels: int = Field(32, ge=1)
    roi_dim: int = Field(32, ge=1)
    num_classes: int = Field(3, ge=1)
    top_k: int = Field(8, ge=1)
    anchor_size: float = Field(8.0, gt=0)
    fg_threshold: float = Field(0.5, gt=0, lt=1)
    match_iou: float = Field(0.5, gt=0, le=1)
    nms_iou: float = Field(0.5, gt=0, le=1)
    smooth_l1_delta: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _grid(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.top_k > self.grid ** 2:
            raise ValueError("top_k exceeds the number of grid cells")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def shapes(self) -> dict[str, tuple[int, ...]]:
        p, c_in, c1, c, d, k = (self.patch, self.in_channels, self.hidden_channels,
                                self.feature_channels, self.roi_dim, self.num_classes)
        return {
            "conv1_w": (p * p * c_in, c1), "conv1_b": (c1,),
            "conv2_w": (9 * c1, c), "conv2_b": (c,),
            "obj_w": (c,), "obj_b": (1,),
            "rpn_w": (c, 4), "rpn_b": (4,),
            "roi_w": (9 * c, d), "roi_b": (d,),
            "cls_w": (d, k + 1), "cls_b": (k + 1,),
            "reg_w": (d, 4), "reg_b": (4,),
        }


@dataclass(frozen=True)
class DetectorParams:
    config: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(self.tensors) != set(shapes):
            raise ShapeMismatch(f"parameter names {sorted(self.tensors)} != {sorted(shapes)}")
        frozen = {}
        for name in PARAM_ORDER:
            arr = np.array(self.tensors[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != {shapes[name]}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, **updates: np.ndarray) -> "DetectorParams":
        return DetectorParams(self.config, {**self.tensors, **updates})

    def equal(self, other: "DetectorParams") -> bool:
        return all(self[n].tobytes() == other[n].tobytes() for n in PARAM_ORDER)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DetectorParams":
        return cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "DetectorParams":
        out = {}
        for name, shape in config.shapes().items():
            if name.endswith("_b"):
                out[name] = np.zeros(shape)
            elif name in ("cls_w", "reg_w", "obj_w", "rpn_w"):
                out[name] = rng.normal(0.0, 0.01, size=shape)
            else:
                out[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        return cls(config, out)


Grads = dict


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """``(B, G, G, C)`` -> ``(B, G, G, 9C)`` zero-padded 3x3 neighbourhoods."""
    b, g, _, c = x.shape
    pad = np.zeros((b, g + 2, g + 2, c))
    pad[:, 1:-1, 1:-1] = x
    return np.concatenate([pad[:, dy:dy + g, dx:dx + g] for dy in range(3) for dx in range(3)], axis=-1)


def _col2im3(cols: np.ndarray, c: int) -> np.ndarray:
    b, g = cols.shape[:2]
    pad = np.zeros((b, g + 2, g + 2, c))
    for n, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
        pad[:, dy:dy + g, dx:dx + g] += cols[..., n * c:(n + 1) * c]
    return pad[:, 1:-1, 1:-1]


def anchors(config: ModelConfig) -> np.ndarray:
    """Anchor box per grid cell, shape ``(G, G, 4)``."""
    g, p = config.grid, config.patch
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    out = np.zeros((g, g, 4))
    out[..., 0] = (jj + 0.5) * p
    out[..., 1] = (ii + 0.5) * p
    out[..., 2:] = config.anchor_size
    return out


@dataclass
class ForwardTrace:
    """Outputs and cached intermediates of one batched forward pass."""

    config: ModelConfig
    patches: np.ndarray
    z1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    feature_map: np.ndarray
    obj_logits: np.ndarray
    rpn_deltas: np.ndarray
    cells: np.ndarray             # (B, k) flat cell index of each proposal
    proposal_boxes: np.ndarray    # (B, k, 4)
    objectness: np.ndarray        # (B, k) sigmoid score of each proposal
    roi_in: np.ndarray
    roi_pre: np.ndarray
    roi_features: np.ndarray      # (B, k, D)
    cls_logits: np.ndarray
    reg_deltas: np.ndarray
    detections: list[list[Detection]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.feature_map.shape[0]

    @property
    def fg_mask(self) -> np.ndarray:
        return self.objectness >= self.config.fg_threshold

    def foreground_features(self, b: int) -> np.ndarray:
        """Features of the proposals of scene ``b`` that pass the objectness filter."""
        return self.roi_features[b][self.fg_mask[b]]

    def class_probs(self) -> np.ndarray:
        return _softmax(self.cls_logits)

    def detection_boxes(self) -> np.ndarray:
        return bx.decode(self.proposal_boxes, self.reg_deltas)


def _stack_pixels(scenes, config: ModelConfig) -> np.ndarray:
    if isinstance(scenes, ToyScene):
        scenes = [scenes]
    x = np.stack([s.pixels if isinstance(s, ToyScene) else np.asarray(s, dtype=np.float64) for s in scenes])
    want = (config.image_size, config.image_size, config.in_channels)
    if x.shape[1:] != want:
        raise ShapeMismatch(f"scene shape {x.shape[1:]} != model input {want}")
    return x


def forward(params: DetectorParams, scenes, mode: str = "infer") -> ForwardTrace:
    """Run the detector on one scene or a sequence of scenes."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = params.config
    x = _stack_pixels(scenes, cfg)
    b, p, g = x.shape[0], cfg.patch, cfg.grid
    patches = x.reshape(b, g, p, g, p, cfg.in_channels).transpose(0, 1, 3, 2, 4, 5).reshape(b, g, g, -1)
    z1 = patches @ params["conv1_w"] + params["conv1_b"]
    cols2 = _im2col3(_relu(z1))
    z2 = cols2 @ params["conv2_w"] + params["conv2_b"]
    fmap = _relu(z2)
    obj = fmap @ params["obj_w"] + params["obj_b"][0]
    rpn = fmap @ params["rpn_w"] + params["rpn_b"]

    flat_obj = obj.reshape(b, -1)
    cells = np.argsort(-flat_obj, axis=1, kind="stable")[:, :cfg.top_k]
    rows = np.arange(b)[:, None]
    ci, cj = cells // g, cells % g
    anc = anchors(cfg)[ci, cj]
    proposal_boxes = bx.decode(anc, rpn[rows, ci, cj])
    objectness = _sigmoid(flat_obj[rows, cells])

    roi_in = _im2col3(fmap)[rows, ci, cj]
    roi_pre = roi_in @ params["roi_w"] + params["roi_b"]
    roi = _relu(roi_pre)
    cls_logits = roi @ params["cls_w"] + params["cls_b"]
    reg = roi @ params["reg_w"] + params["reg_b"]

    trace = ForwardTrace(cfg, patches, z1, cols2, z2, fmap, obj, rpn, cells, proposal_boxes,
                         objectness, roi_in, roi_pre, roi, cls_logits, reg)
    trace.detections = _detections(trace, suppress=(mode == "infer"))
    return trace


def _detections(trace: ForwardTrace, suppress: bool) -> list[list[Detection]]:
    cfg = trace.config
    probs = trace.class_probs()
    det_boxes = bx.clip_boxes(trace.detection_boxes(), cfg.image_size, cfg.image_size)
    out = []
    for b in range(trace.batch_size):
        labels = probs[b].argmax(axis=1)
        keep = np.flatnonzero(labels != cfg.num_classes)
        scores = probs[b][keep, labels[keep]]
        if suppress and keep.size:
            kept = bx.greedy_nms(det_boxes[b][keep], scores, cfg.nms_iou)
        else:
            kept = list(np.argsort(-scores, kind="stable"))
        out.append([Detection(det_boxes[b][keep[i]], labels[keep[i]], scores[i]) for i in kept])
    return out


# ---------------------------------------------------------------- backward


def _empty_upstream(trace: ForwardTrace) -> dict:
    return {
        "cls": np.zeros_like(trace.cls_logits),
        "reg": np.zeros_like(trace.reg_deltas),
        "roi": np.zeros_like(trace.roi_features),
        "obj": np.zeros_like(trace.obj_logits),
        "rpn": np.zeros_like(trace.rpn_deltas),
        "fmap": np.zeros_like(trace.feature_map),
    }


def backward(params: DetectorParams, trace: ForwardTrace, upstream: Mapping[str, np.ndarray]) -> Grads:
    """Parameter gradients given gradients on the trace outputs.

    ``upstream`` may carry any of ``cls``, ``reg``, ``roi`` (ROI features),
    ``obj``, ``rpn`` and ``fmap`` (feature map); missing keys are zero.
    """
    up = _empty_upstream(trace)
    for key, val in upstream.items():
        if key not in up:
            raise KeyError(f"unknown upstream key {key!r}")
        if np.shape(val) != up[key].shape:
            raise ShapeMismatch(f"upstream {key}: {np.shape(val)} != {up[key].shape}")
        up[key] = np.asarray(val, dtype=np.float64)
    cfg = trace.config
    b, g = trace.batch_size, cfg.grid
    grads: Grads = {}

    roi = trace.roi_features.reshape(-1, cfg.roi_dim)
    d_cls = up["cls"].reshape(-1, cfg.num_classes + 1)
    d_reg = up["reg"].reshape(-1, 4)
    grads["cls_w"] = roi.T @ d_cls
    grads["cls_b"] = d_cls.sum(axis=0)
    grads["reg_w"] = roi.T @ d_reg
    grads["reg_b"] = d_reg.sum(axis=0)
    d_roi = up["cls"] @ params["cls_w"].T + up["reg"] @ params["reg_w"].T + up["roi"]
    d_roi_pre = d_roi * (trace.roi_pre > 0)
    grads["roi_w"] = trace.roi_in.reshape(-1, trace.roi_in.shape[-1]).T @ d_roi_pre.reshape(-1, cfg.roi_dim)
    grads["roi_b"] = d_roi_pre.reshape(-1, cfg.roi_dim).sum(axis=0)
    d_roi_in = d_roi_pre @ params["roi_w"].T

    c = cfg.feature_channels
    d_cols_f = np.zeros((b, g, g, 9 * c))
    rows = np.broadcast_to(np.arange(b)[:, None], trace.cells.shape)
    np.add.at(d_cols_f, (rows, trace.cells // g, trace.cells % g), d_roi_in)
    d_fmap = _col2im3(d_cols_f, c) + up["fmap"]
    fmap = trace.feature_map.reshape(-1, c)
    grads["obj_w"] = fmap.T @ up["obj"].reshape(-1)
    grads["obj_b"] = np.array([up["obj"].sum()])
    grads["rpn_w"] = fmap.T @ up["rpn"].reshape(-1, 4)
    grads["rpn_b"] = up["rpn"].reshape(-1, 4).sum(axis=0)
    d_fmap = d_fmap + up["obj"][..., None] * params["obj_w"] + up["rpn"] @ params["rpn_w"].T

    d_z2 = (d_fmap * (trace.z2 > 0)).reshape(-1, c)
    grads["conv2_w"] = trace.cols2.reshape(-1, trace.cols2.shape[-1]).T @ d_z2
    grads["conv2_b"] = d_z2.sum(axis=0)
    c1 = cfg.hidden_channels
    d_h1 = _col2im3((d_z2 @ params["conv2_w"].T).reshape(b, g, g, -1), c1)
    d_z1 = (d_h1 * (trace.z1 > 0)).reshape(-1, c1)
    grads["conv1_w"] = trace.patches.reshape(-1, trace.patches.shape[-1]).T @ d_z1
    grads["conv1_b"] = d_z1.sum(axis=0)
    return grads


def add_grads(a: Grads, b: Grads, scale: float = 1.0) -> Grads:
    return {n: a[n] + scale * b[n] for n in a}


def zero_grads(config: ModelConfig) -> Grads:
    return {n: np.zeros(s) for n, s in config.shapes().items()}


# ------------------------------------------------------------ losses


def smooth_l1(x: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative."""
    ax = np.abs(x)
    small = ax < delta
    loss = np.where(small, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.where(small, x / delta, np.sign(x))
    return loss, grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient."""
    probs = _softmax(logits)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def match_proposals(proposals: np.ndarray, targets: np.ndarray, threshold: float) -> np.ndarray:
    """Index of the matched target per proposal, or -1.

    Each proposal takes its highest-IoU target when that IoU reaches
    ``threshold``; several proposals may share one target.
    """
    if len(targets) == 0:
        return np.full(len(proposals), -1)
    ious = bx.iou_matrix(proposals, targets)
    best = ious.argmax(axis=1)
    ok = ious[np.arange(len(proposals)), best] >= threshold
    return np.where(ok, best, -1)


LOSS_KEYS = ("obj", "rpn_reg", "roi_cls", "roi_reg")


def supervised_upstream(trace: ForwardTrace, targets: Sequence[Sequence[Annotation]],
                        cls_weight: float = 1.0, reg_weight: float = 1.0) -> tuple[dict, dict]:
    """Loss components (averaged over scenes) and the matching upstream gradients.

    Classification-type terms (objectness BCE, ROI cross-entropy) are scaled
    by ``cls_weight``; regression terms (proposal and ROI smooth-L1) by
    ``reg_weight``.  Scenes with no targets contribute nothing.
    """
    cfg = trace.config
    b, g = trace.batch_size, cfg.grid
    if len(targets) != b:
        raise ShapeMismatch(f"{len(targets)} target lists for a batch of {b}")
    if trace.cells.shape[1] == 0:
        raise NoProposals("trace has no proposals")
    up = _empty_upstream(trace)
    losses = dict.fromkeys(LOSS_KEYS, 0.0)
    anc = anchors(cfg).reshape(-1, 4)
    for i, scene_targets in enumerate(targets):
        if not scene_targets:
            continue
        tboxes = np.array([t.box for t in scene_targets], dtype=np.float64)
        tcls = np.array([t.class_id for t in scene_targets], dtype=int)

        # objectness: the cell holding a target centre is positive
        pos_target = {}
        for t_idx, (cx, cy) in enumerate(tboxes[:, :2]):
            cell = int(min(max(cy // cfg.patch, 0), g - 1)) * g + int(min(max(cx // cfg.patch, 0), g - 1))
            pos_target.setdefault(cell, t_idx)
        labels = np.zeros(g * g)
        pos = np.array(sorted(pos_target), dtype=int)
        labels[pos] = 1.0
        logits = trace.obj_logits[i].reshape(-1)
        bce = np.logaddexp(0.0, logits) - labels * logits
        dbce = _sigmoid(logits) - labels
        neg = labels == 0
        weight = np.where(neg, 1.0 / max(neg.sum(), 1), 1.0 / len(pos))
        losses["obj"] += cls_weight * float(np.sum(bce * weight)) / b
        up["obj"][i] = (cls_weight * dbce * weight / b).reshape(g, g)

        # proposal box offsets at positive cells
        rpn = trace.rpn_deltas[i].reshape(-1, 4)
        resid = rpn[pos] - bx.encode(anc[pos], tboxes[[pos_target[c] for c in pos]])
        l1, dl1 = smooth_l1(resid, cfg.smooth_l1_delta)
        losses["rpn_reg"] += reg_weight * float(l1.sum()) / len(pos) / b
        d_rpn = np.zeros((g * g, 4))
        d_rpn[pos] = reg_weight * dl1 / len(pos) / b
        up["rpn"][i] = d_rpn.reshape(g, g, 4)

        # ROI classification and regression
        match = match_proposals(trace.proposal_boxes[i], tboxes, cfg.match_iou)
        roi_labels = np.where(match >= 0, tcls[np.maximum(match, 0)], cfg.num_classes)
        ce, dce = cross_entropy(trace.cls_logits[i], roi_labels)
        losses["roi_cls"] += cls_weight * ce / b
        up["cls"][i] = cls_weight * dce / b
        matched = np.flatnonzero(match >= 0)
        if matched.size:
            resid = trace.reg_deltas[i][matched] - bx.encode(trace.proposal_boxes[i][matched], tboxes[match[matched]])
            l1, dl1 = smooth_l1(resid, cfg.smooth_l1_delta)
            losses["roi_reg"] += reg_weight * float(l1.sum()) / matched.size / b
            up["reg"][i][matched] = reg_weight * dl1 / matched.size / b
    return losses, up


def supervised_loss_and_grads(params: DetectorParams, scenes, targets, cls_weight: float = 1.0,
                              reg_weight: float = 1.0, trace: Optional[ForwardTrace] = None):
    """Faster R-CNN style losses on labelled scenes and all parameter gradients."""
    if trace is None:
        trace = forward(params, scenes, mode="train")
    if isinstance(scenes, ToyScene):
        targets = [targets]
    losses, up = supervised_upstream(trace, targets, cls_weight, reg_weight)
    return losses, backward(params, trace, up)


def feature_upstream(trace: ForwardTrace, global_grad: Optional[np.ndarray],
                     foreground_grad: Optional[Sequence[Optional[np.ndarray]]]) -> dict:
    """Upstream gradients that route pooled-feature gradients to the map and proposals.

    ``global_grad`` has one row per scene (dim C), spread evenly over the
    ``H x W`` cells; each ``foreground_grad`` entry (dim D, or ``None``) is
    spread evenly over that scene's foreground proposals.
    """
    cfg = trace.config
    b = trace.batch_size
    up = {}
    if global_grad is not None:
        gg = np.asarray(global_grad, dtype=np.float64).reshape(b, -1)
        if gg.shape[1] != cfg.feature_channels:
            raise ShapeMismatch(f"global gradient dim {gg.shape[1]} != C = {cfg.feature_channels}")
        up["fmap"] = np.broadcast_to(gg[:, None, None, :] / cfg.grid ** 2, trace.feature_map.shape).copy()
    if foreground_grad is not None:
        if len(foreground_grad) != b:
            raise ShapeMismatch("need one foreground gradient entry per scene")
        d_roi = np.zeros_like(trace.roi_features)
        mask = trace.fg_mask
        for i, fg in enumerate(foreground_grad):
            n_a = int(mask[i].sum())
            if fg is None or n_a == 0:
                continue
            fg = np.asarray(fg, dtype=np.float64).reshape(-1)
            if fg.size != cfg.roi_dim:
                raise ShapeMismatch(f"foreground gradient dim {fg.size} != D = {cfg.roi_dim}")
            d_roi[i][mask[i]] = fg / n_a
        up["roi"] = d_roi
    return up


def inject_feature_gradient(params: DetectorParams, trace: ForwardTrace, global_grad, foreground_grad) -> Grads:
    return backward(params, trace, feature_upstream(trace, global_grad, foreground_grad))


# ------------------------------------------------------------ optimisation


def resolve_scope(scope) -> tuple[str, ...]:
    if scope in ("backbone", None):
        return BACKBONE
    if scope == "all":
        return PARAM_ORDER
    names = tuple(scope)
    unknown = set(names) - set(PARAM_ORDER)
    if unknown:
        raise ValueError(f"unknown parameters in scope: {sorted(unknown)}")
    return names


def sgd_momentum_step(params: DetectorParams, grads: Grads, lr: float, momentum: float,
                      state: Optional[Mapping[str, np.ndarray]] = None, scope="backbone"):
    """``v <- momentum * v + g; p <- p - lr * v`` on the parameters in ``scope``.

    Returns ``(new_params, new_state)``; parameters outside the scope are
    left untouched and carry no velocity.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    state = dict(state or {})
    updates = {}
    for name in resolve_scope(scope):
        if grads[name].shape != params[name].shape:
            raise ShapeMismatch(f"{name}: grad shape {grads[name].shape} != {params[name].shape}")
        v = momentum * state.get(name, np.zeros_like(params[name])) + grads[name]
        state[name] = v
        updates[name] = params[name] - lr * v
    return params.replace(**updates), state


def ema_update(teacher: DetectorParams, student: DetectorParams, beta: float) -> DetectorParams:
    """Every teacher weight becomes ``beta * teacher + (1 - beta) * student``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if teacher.config.shapes() != student.config.shapes():
        raise ShapeMismatch("teacher and student shapes differ")
    return teacher.replace(**{n: beta * teacher[n] + (1.0 - beta) * student[n] for n in PARAM_ORDER})


# ------------------------------------------------------------ checkpoints


def save_checkpoint(params: DetectorParams, directory, extra: Optional[dict] = None) -> None:
    """JSON manifest plus one little-endian float64 blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"model": params.config.model_dump(), "tensors": {}, "extra": extra or {}}
    for name in PARAM_ORDER:
        arr = params[name]
        (directory / f"{name}.bin").write_bytes(arr.astype("<f8").tobytes())
        manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": "<f8", "file": f"{name}.bin"}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[DetectorParams, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = ModelConfig(**manifest["model"])
    tensors = {}
    for name, meta in manifest["tensors"].items():
        raw = np.frombuffer((directory / meta["file"]).read_bytes(), dtype=meta["dtype"])
        tensors[name] = raw.astype(np.float64).reshape(meta["shape"])
    return DetectorParams(config, tensors), manifest.get("extra", {})
