"""Closed-form (symmetric) KL between Gaussians and its gradients.

All solves and log-determinants go through a Cholesky factor; explicit
inverses are formed only where the gradient needs the matrix itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import DimMismatch, NotPositiveDefinite
from .stats import GaussianStats, StreamConfig


@dataclass(frozen=True)
class AlignmentGrad:
    d_mean: np.ndarray
    d_cov: np.ndarray


def _factor(cov: np.ndarray) -> np.ndarray:
    try:
        return cholesky(cov, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite; regularize first") from exc


def check_positive_definite(stats: GaussianStats) -> None:
    """Raise ``NotPositiveDefinite`` unless a Cholesky factor exists."""
    _factor(stats.cov)


def _logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def _inverse(chol: np.ndarray) -> np.ndarray:
    return cho_solve((chol, True), np.eye(chol.shape[0]))


def _check(p: GaussianStats, q: GaussianStats) -> None:
    if p.dim != q.dim:
        raise DimMismatch(f"dims differ: {p.dim} vs {q.dim}")


def kl_gaussian(p: GaussianStats, q: GaussianStats) -> float:
    """KL(p || q) for multivariate normals."""
    _check(p, q)
    lp, lq = _factor(p.cov), _factor(q.cov)
    trace = float(np.trace(cho_solve((lq, True), p.cov)))
    diff = q.mean - p.mean
    maha = float(diff @ cho_solve((lq, True), diff))
    return 0.5 * (trace + maha - p.dim + _logdet(lq) - _logdet(lp))


def sym_kl(source: GaussianStats, target: GaussianStats) -> float:
    return kl_gaussian(source, target) + kl_gaussian(target, source)


def sym_kl_grad(source: GaussianStats, target: GaussianStats) -> AlignmentGrad:
    """Gradient of ``sym_kl`` with respect to the target mean and covariance.

    The source distribution is held constant.
    """
    _check(source, target)
    inv_s = _inverse(_factor(source.cov))
    inv_t = _inverse(_factor(target.cov))
    diff = target.mean - source.mean
    d_mean = inv_t @ diff + inv_s @ diff
    # KL(s||t) contributes 1/2 [inv_t - inv_t (cov_s + diff diff^T) inv_t],
    # KL(t||s) contributes 1/2 [inv_s - inv_t]; the inv_t terms cancel.
    outer = source.cov + np.outer(diff, diff)
    d_cov = 0.5 * (inv_s - inv_t @ outer @ inv_t)
    return AlignmentGrad(d_mean, 0.5 * (d_cov + d_cov.T))


def backprop_to_features(
    grad: AlignmentGrad,
    batch_features: Sequence[np.ndarray],
    pre_update_stats: GaussianStats,
    cfg: StreamConfig,
) -> np.ndarray:
    """Chain a target-statistics gradient back to this batch's features.

    Historical statistics are constants; only the batch's contribution to
    the streaming update receives gradient.  Returns one row per sample.
    """
    x = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in batch_features])
    if x.shape[1] != pre_update_stats.dim or grad.d_mean.size != x.shape[1]:
        raise DimMismatch("gradient, features and statistics must share one dimension")
    gamma = cfg.gamma
    resid = x - pre_update_stats.mean
    delta = gamma * resid.sum(axis=0)
    sym = grad.d_cov + grad.d_cov.T
    return gamma * grad.d_mean[None, :] + gamma * resid @ sym.T - gamma * (sym @ delta)[None, :]
