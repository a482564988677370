"""Pooled feature vectors and Gaussian summaries of their distribution.

Source statistics are fitted offline with population normalisation; target
statistics are advanced batch by batch with an exponential-moving-average
rule whose step is ``gamma * batch_size``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimMismatch, EmptyOrSingleton, NotSymmetric, RateOverflow

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise DimMismatch(f"cov shape {cov.shape} does not match mean dim {mean.size}")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_json(self) -> dict:
        return {"dim": self.dim, "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "GaussianStats":
        stats = cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["cov"], dtype=np.float64))
        if stats.dim != int(doc["dim"]):
            raise DimMismatch(f"declared dim {doc['dim']} but mean has {stats.dim} entries")
        return stats

    def save(self, path) -> None:
        # json emits repr() floats, the shortest decimal that round-trips a double
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "GaussianStats":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class StreamConfig:
    gamma: float = 1.0 / 64
    epsilon_jitter: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.epsilon_jitter > 0.0:
            raise ValueError(f"epsilon_jitter must be positive, got {self.epsilon_jitter}")


def pool_global(feature_map: np.ndarray) -> np.ndarray:
    """Average an ``H x W x C`` feature map over its spatial grid."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3 or min(fmap.shape) < 1:
        raise DimMismatch(f"expected a non-empty H x W x C map, got shape {fmap.shape}")
    return fmap.mean(axis=(0, 1))


def pool_foreground(proposals: np.ndarray) -> Optional[np.ndarray]:
    """Average proposal features; ``None`` when no proposal survived filtering."""
    props = np.asarray(proposals, dtype=np.float64)
    if props.ndim != 2:
        raise DimMismatch(f"expected an N_a x D matrix, got shape {props.shape}")
    if props.shape[0] == 0:
        return None
    return props.mean(axis=0)


def _stack(features: Sequence[np.ndarray]) -> np.ndarray:
    dims = {np.asarray(f).reshape(-1).size for f in features}
    if len(dims) > 1:
        raise DimMismatch(f"feature vectors have mixed dims {sorted(dims)}")
    return np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in features])


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def fit_source(features: Sequence[np.ndarray]) -> GaussianStats:
    """Mean and population (1/N) covariance of a set of feature vectors."""
    if len(features) < 2:
        raise EmptyOrSingleton(f"need at least 2 feature vectors, got {len(features)}")
    x = _stack(features)
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / x.shape[0]
    return GaussianStats(mu, _symmetrize(cov))


def update_streaming(stats: GaussianStats, batch: Sequence[np.ndarray], cfg: StreamConfig) -> GaussianStats:
    """Advance target statistics with one batch.

    The pre-update mean is used on every right-hand-side occurrence, so
    ``delta = gamma * sum(g - mu)``, ``mu' = mu + delta`` and
    ``cov' = cov + gamma * sum((g - mu)(g - mu)^T - cov) - delta delta^T``.
    """
    if len(batch) == 0:
        raise EmptyOrSingleton("streaming update needs a non-empty batch")
    x = _stack(batch)
    if x.shape[1] != stats.dim:
        raise DimMismatch(f"batch dim {x.shape[1]} != stats dim {stats.dim}")
    rate = cfg.gamma * x.shape[0]
    if rate >= 1.0:
        raise RateOverflow(f"gamma * |B| = {rate} >= 1")
    resid = x - stats.mean
    delta = cfg.gamma * resid.sum(axis=0)
    scatter = resid.T @ resid
    cov = stats.cov + cfg.gamma * (scatter - x.shape[0] * stats.cov) - np.outer(delta, delta)
    return GaussianStats(stats.mean + delta, _symmetrize(cov))


def default_jitter(cov: np.ndarray) -> float:
    """``1e-6`` scaled by the mean diagonal magnitude, floored at 1."""
    scale = float(np.mean(np.abs(np.diag(cov)))) if np.size(cov) else 0.0
    return 1e-6 * max(scale, 1.0)


def regularize_cov(cov: np.ndarray, epsilon: float) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimMismatch(f"covariance must be square, got {cov.shape}")
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL:
        raise NotSymmetric("covariance is not symmetric")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return cov + epsilon * np.eye(cov.shape[0])


def regularize(stats: GaussianStats, epsilon: float | None = None) -> GaussianStats:
    eps = default_jitter(stats.cov) if epsilon is None else epsilon
    return GaussianStats(stats.mean, regularize_cov(stats.cov, eps))
