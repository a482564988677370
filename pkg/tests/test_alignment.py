import math

import numpy as np
import pytest

from ttadet.alignment import AlignmentGrad, backprop_to_features, kl_gaussian, sym_kl, sym_kl_grad
from ttadet.errors import DimMismatch, NotPositiveDefinite
from ttadet.stats import GaussianStats, StreamConfig, regularize, update_streaming

H = 1e-5


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_gaussian(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return GaussianStats(rng.normal(size=d) * scale, a @ a.T / d + 0.5 * np.eye(d))


def g1(mu, var):
    return GaussianStats(np.array([mu]), np.array([[var]]))


def test_kl_hand_cases():
    assert kl_gaussian(GaussianStats(np.zeros(3), np.eye(3)), GaussianStats(np.zeros(3), np.eye(3))) == 0.0
    assert abs(kl_gaussian(g1(0, 1), g1(1, 1)) - 0.5) <= 1e-9
    assert abs(kl_gaussian(g1(0, 2), g1(0, 1)) - 0.5 * (2 - 1 + math.log(0.5))) <= 1e-9
    assert abs(sym_kl(g1(0, 1), g1(1, 1)) - 1.0) <= 1e-9


def test_kl_matches_explicit_inverse_formula():
    rng = np.random.default_rng(0)
    for d in (2, 5):
        p, q = random_gaussian(rng, d), random_gaussian(rng, d)
        iq = np.linalg.inv(q.cov)
        diff = q.mean - p.mean
        ref = 0.5 * (np.trace(iq @ p.cov) + diff @ iq @ diff - d
                     + np.linalg.slogdet(q.cov)[1] - np.linalg.slogdet(p.cov)[1])
        assert abs(kl_gaussian(p, q) - ref) <= 1e-10


def test_sym_kl_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = int(rng.integers(1, 7))
        a, b = random_gaussian(rng, d), random_gaussian(rng, d)
        assert abs(sym_kl(a, b) - sym_kl(b, a)) <= 1e-10


def test_kl_errors():
    with pytest.raises(DimMismatch):
        kl_gaussian(g1(0, 1), GaussianStats(np.zeros(2), np.eye(2)))
    with pytest.raises(NotPositiveDefinite):
        kl_gaussian(g1(0, 1), GaussianStats(np.zeros(1), np.zeros((1, 1))))


def fd_cov_grad(source, target):
    d = target.dim
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            e = np.zeros((d, d))
            e[i, j] = e[j, i] = H
            up = sym_kl(source, GaussianStats(target.mean, target.cov + e))
            dn = sym_kl(source, GaussianStats(target.mean, target.cov - e))
            val = (up - dn) / (2 * H)
            # a symmetric perturbation of an off-diagonal pair measures G_ij + G_ji
            out[i, j] = out[j, i] = val if i == j else val / 2
    return out


def fd_mean_grad(source, target):
    d = target.dim
    out = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = H
        out[i] = (sym_kl(source, GaussianStats(target.mean + e, target.cov))
                  - sym_kl(source, GaussianStats(target.mean - e, target.cov))) / (2 * H)
    return out


def test_sym_kl_grad_trivial():
    s = GaussianStats(np.array([0.3, -0.2]), np.array([[1.0, 0.2], [0.2, 2.0]]))
    g = sym_kl_grad(s, s)
    assert np.allclose(g.d_mean, 0, atol=1e-12) and np.allclose(g.d_cov, 0, atol=1e-12)
    g = sym_kl_grad(g1(0, 1), g1(1, 1))
    assert abs(g.d_mean[0] - 2.0) <= 1e-12


def test_sym_kl_grad_finite_differences():
    rng = np.random.default_rng(2)
    for d in (1, 2, 5, 8):
        source, target = random_gaussian(rng, d), random_gaussian(rng, d)
        g = sym_kl_grad(source, target)
        assert np.max(rel_err(g.d_mean, fd_mean_grad(source, target))) <= 1e-5
        assert np.max(rel_err(g.d_cov, fd_cov_grad(source, target))) <= 1e-5
        assert np.max(np.abs(g.d_cov - g.d_cov.T)) <= 1e-10


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_gradient_descent_sanity(d):
    # unit-scale source spectrum; plain descent on a covariance slows as 1/eig^2
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    source = GaussianStats(rng.normal(size=d), q @ np.diag(rng.uniform(0.25, 1.0, d)) @ q.T)
    mu, cov = source.mean + 1.0, 2.0 * source.cov
    start = sym_kl(source, GaussianStats(mu, cov))
    for _ in range(500):
        g = sym_kl_grad(source, GaussianStats(mu, cov))
        mu, cov = mu - 0.01 * g.d_mean, cov - 0.01 * g.d_cov
    assert sym_kl(source, GaussianStats(mu, cov)) < 1e-3 * start


def chained_loss(source, pre, batch, cfg):
    return sym_kl(source, regularize(update_streaming(pre, list(batch), cfg), 1e-6))


def test_backprop_to_features_trivial():
    pre = GaussianStats(np.array([1.0, 2.0]), np.eye(2))
    cfg = StreamConfig(gamma=0.1)
    zero = AlignmentGrad(np.zeros(2), np.zeros((2, 2)))
    assert np.all(backprop_to_features(zero, [np.ones(2), np.zeros(2)], pre, cfg) == 0)
    v = np.array([0.5, -1.5])
    rows = backprop_to_features(AlignmentGrad(v, np.zeros((2, 2))), [pre.mean.copy()], pre, cfg)
    np.testing.assert_allclose(rows[0], 0.1 * v, atol=1e-15)


@pytest.mark.parametrize("d", [1, 3, 5])
def test_backprop_to_features_finite_differences(d):
    rng = np.random.default_rng(10 + d)
    source = random_gaussian(rng, d)
    pre = random_gaussian(rng, d)
    cfg = StreamConfig(gamma=1 / 16)
    batch = rng.normal(size=(4, d)) + pre.mean
    post = regularize(update_streaming(pre, list(batch), cfg), 1e-6)
    rows = backprop_to_features(sym_kl_grad(source, post), list(batch), pre, cfg)
    num = np.zeros_like(batch)
    for i in range(batch.shape[0]):
        for k in range(d):
            up, dn = batch.copy(), batch.copy()
            up[i, k] += H
            dn[i, k] -= H
            num[i, k] = (chained_loss(source, pre, up, cfg) - chained_loss(source, pre, dn, cfg)) / (2 * H)
    assert np.max(rel_err(rows, num)) <= 1e-4
