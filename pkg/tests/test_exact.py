import math

import numpy as np
import pytest

from coupledgp.exact import (
    AdditiveExactModel,
    OptimizationFailed,
    exact_log_evidence,
    exact_pointwise,
    exact_posterior,
    fit_hyperparameters,
)
from coupledgp.experiment import generate_toy
from coupledgp.kernels import SqExpHyper

H = (SqExpHyper.create(1.0, 1.0), SqExpHyper.create(1.0, 1.0))


def _gram(var, ls, a, b):
    return var * np.exp(-0.5 * (np.subtract.outer(a, b) / ls) ** 2)


def brute_force_posterior(X, y, Xs, hyp, noise):
    """Condition the explicit joint Gaussian [f1(Xs); f2(Xs); y] on y."""
    (v1, l1), (v2, l2) = hyp
    n = len(y)
    ns = Xs.shape[0]
    # latent vector: f1 at (Xs, X), f2 at (Xs, X)
    g1 = np.concatenate([Xs[:, 0], X[:, 0]])
    g2 = np.concatenate([Xs[:, 1], X[:, 1]])
    K = np.zeros((2 * (ns + n), 2 * (ns + n)))
    K[: ns + n, : ns + n] = _gram(v1, l1, g1, g1)
    K[ns + n :, ns + n :] = _gram(v2, l2, g2, g2)
    # y = f1(X) + f2(X) + e
    Sel = np.zeros((n, 2 * (ns + n)))
    Sel[:, ns : ns + n] = np.eye(n)
    Sel[:, 2 * ns + n :] = np.eye(n)
    Kyy = Sel @ K @ Sel.T + noise**2 * np.eye(n)
    Kfy = K @ Sel.T
    mean = Kfy @ np.linalg.solve(Kyy, y)
    cov = K - Kfy @ np.linalg.solve(Kyy, Kfy.T)
    keep = np.r_[0:ns, ns + n : 2 * ns + n]
    return mean[keep].reshape(2, ns).T, cov[np.ix_(keep, keep)]


def test_scalar_evidence_examples():
    X = np.array([[0.3, -0.2]])
    m = AdditiveExactModel.build(X, [0.0], H, 1.0)
    base = -0.5 * math.log(2 * math.pi * 3)  # -1.46824468
    assert exact_log_evidence(m) == pytest.approx(base, abs=1e-12)
    m = AdditiveExactModel.build(X, [math.sqrt(3)], H, 1.0)
    assert exact_log_evidence(m) == pytest.approx(base - 0.5, abs=1e-12)


def test_evidence_matches_scipy(rng):
    from scipy.stats import multivariate_normal

    X = rng.uniform(-3, 3, (20, 2))
    y = rng.normal(size=20)
    hyp = (SqExpHyper.create(0.7, 0.9), SqExpHyper.create(1.4, 0.5))
    K = _gram(0.7, 0.9, X[:, 0], X[:, 0]) + _gram(1.4, 0.5, X[:, 1], X[:, 1]) + 0.3**2 * np.eye(20)
    m = AdditiveExactModel.build(X, y, hyp, 0.3)
    assert exact_log_evidence(m) == pytest.approx(multivariate_normal(np.zeros(20), K).logpdf(y), rel=1e-10)


def test_latent_relabeling(rng):
    X = rng.uniform(-3, 3, (15, 2))
    y = rng.normal(size=15)
    a = exact_log_evidence(AdditiveExactModel.build(X, y, H, 0.5))
    b = exact_log_evidence(AdditiveExactModel.build(X[:, ::-1], y, H, 0.5))
    assert a == pytest.approx(b, abs=1e-10)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_posterior_matches_brute_force(rng, n):
    X = rng.uniform(-3, 3, (n, 2))
    y = rng.normal(size=n)
    Xs = rng.uniform(-3, 3, (4, 2))
    hyp = ((0.8, 0.7), (1.3, 1.1))
    model = AdditiveExactModel.build(X, y, [SqExpHyper.create(*h) for h in hyp], 0.4)
    post = exact_posterior(model, Xs)
    mean, cov = brute_force_posterior(X, y, Xs, hyp, 0.4)
    np.testing.assert_allclose(post.mean, mean, atol=1e-8)
    np.testing.assert_allclose(post.cov, cov, atol=1e-8)


def test_large_noise_limit(rng):
    X = rng.uniform(-3, 3, (10, 2))
    y = rng.normal(size=10)
    model = AdditiveExactModel.build(X, y, H, 1e6)
    post = exact_posterior(model, X)
    assert np.max(np.abs(post.mean)) <= 1e-6
    prior = np.zeros((20, 20))
    prior[:10, :10] = _gram(1.0, 1.0, X[:, 0], X[:, 0])
    prior[10:, 10:] = _gram(1.0, 1.0, X[:, 1], X[:, 1])
    np.testing.assert_allclose(post.cov, prior, atol=1e-6)


def test_covariance_psd_and_pointwise(rng):
    X = rng.uniform(-3, 3, (25, 2))
    y = rng.normal(size=25)
    model = AdditiveExactModel.build(X, y, (SqExpHyper.create(0.5, 0.8), SqExpHyper.create(1.5, 0.6)), 0.5)
    post = exact_posterior(model, X)
    np.testing.assert_allclose(post.cov, post.cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(post.cov).min() >= -1e-8
    mean, blocks = exact_pointwise(model, X)
    np.testing.assert_allclose(mean, post.mean, rtol=1e-12)
    np.testing.assert_allclose(blocks, post.pointwise(), atol=1e-12)


def test_negative_cross_covariance_on_toy_data():
    data, _ = generate_toy(0, 200)
    hyp = (SqExpHyper.create(0.4, 0.8), SqExpHyper.create(1.5, 0.7))
    model = AdditiveExactModel.build(np.asarray(data.X), np.asarray(data.y), hyp, 0.5)
    _, blocks = exact_pointwise(model, np.asarray(data.X))
    assert np.all(blocks[:, 0, 1] <= 0)


def test_sum_of_means_is_single_gp_mean(rng):
    X = rng.uniform(-3, 3, (30, 2))
    y = rng.normal(size=30)
    model = AdditiveExactModel.build(X, y, (SqExpHyper.create(0.5, 0.8), SqExpHyper.create(1.5, 0.6)), 0.5)
    Ksum = _gram(0.5, 0.8, X[:, 0], X[:, 0]) + _gram(1.5, 0.6, X[:, 1], X[:, 1])
    single = Ksum @ np.linalg.solve(Ksum + 0.25 * np.eye(30), y)
    mean, _ = exact_pointwise(model, X)
    np.testing.assert_allclose(mean.sum(axis=1), single, atol=1e-10)


def test_sum_difference_identity(rng):
    X = rng.uniform(-3, 3, (30, 2))
    model = AdditiveExactModel.build(X, rng.normal(size=30), H, 0.5)
    _, S = exact_pointwise(model, X)
    v1, v2, c = S[:, 0, 0], S[:, 1, 1], S[:, 0, 1]
    np.testing.assert_allclose((v1 + v2 + 2 * c) + (v1 + v2 - 2 * c), 2 * (v1 + v2), atol=1e-12)


def test_fit_improves_evidence():
    data, _ = generate_toy(3, 80)
    X, y = np.asarray(data.X), np.asarray(data.y)
    init = exact_log_evidence(AdditiveExactModel.build(X, y, H, 1.0))
    fit = fit_hyperparameters(X, y, H, 1.0, restarts=2)
    assert fit.log_evidence >= init
    assert fit.log_evidence == pytest.approx(
        exact_log_evidence(AdditiveExactModel.build(X, y, fit.hypers, fit.noise_std)), rel=1e-12
    )


def test_fit_relabel_symmetry():
    data, _ = generate_toy(5, 100)
    X, y = np.asarray(data.X), np.asarray(data.y)
    a = fit_hyperparameters(X, y, H, 1.0)
    b = fit_hyperparameters(X[:, ::-1], y, H, 1.0)
    assert a.log_evidence == pytest.approx(b.log_evidence, abs=1e-6)


@pytest.mark.slow
def test_fit_recovers_noise_level():
    data, _ = generate_toy(0, 500)
    fit = fit_hyperparameters(np.asarray(data.X), np.asarray(data.y), H, 1.0)
    assert 0.35 <= fit.noise_std <= 0.65


def test_fit_all_nonfinite_raises():
    X = np.zeros((3, 2))
    with pytest.raises(OptimizationFailed):
        fit_hyperparameters(X, [np.nan, 0.0, 1.0], H, 1.0, restarts=1, maxiter=20)
