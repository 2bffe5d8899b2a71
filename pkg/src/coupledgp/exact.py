"""Closed-form answers for the conjugate additive model.

With y = sum_c f_c(x_c) + e, e ~ N(0, sigma^2) and independent GP priors,
y is Gaussian with covariance K_sum + sigma^2 I, and the latents are
jointly Gaussian given y. Everything here is plain numpy/scipy so that it
stays independent of the variational code it is used to check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import optimize as sopt

from .kernels import SqExpHyper

logger = logging.getLogger(__name__)


class OptimizationFailed(RuntimeError):
    pass


def _gram(h: SqExpHyper, a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    var = math.exp(float(h.log_variance))
    ls = math.exp(float(h.log_lengthscale))
    return var * np.exp(-0.5 * ((a[:, None] - b[None, :]) / ls) ** 2)


@dataclass
class AdditiveExactModel:
    hypers: tuple
    noise_std: float
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray  # (K_sum + sigma^2 I)^{-1} y

    @classmethod
    def build(cls, X, y, hypers: Sequence[SqExpHyper], noise_std: float) -> "AdditiveExactModel":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(hypers) != X.shape[1]:
            raise ValueError("one hyperparameter set per covariate column is required")
        if not noise_std > 0:
            raise ValueError("noise_std must be positive")
        K = sum(_gram(h, X[:, c], X[:, c]) for c, h in enumerate(hypers))
        K[np.diag_indices_from(K)] += noise_std**2
        chol = sla.cholesky(K, lower=True)
        alpha = sla.cho_solve((chol, True), y)
        return cls(tuple(hypers), float(noise_std), X, y, chol, alpha)

    @property
    def num_latents(self) -> int:
        return self.X.shape[1]


def exact_log_evidence(model: AdditiveExactModel) -> float:
    """log N(y; 0, K_sum + sigma^2 I)."""
    n = model.y.shape[0]
    return float(
        -0.5 * model.y @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * math.log(2.0 * math.pi)
    )


class ExactPosterior(NamedTuple):
    """Posterior over all latents at the test points.

    ``mean`` is (N*, C). ``cov`` is (C N*, C N*), ordered latent-major: row
    c * N* + j is f_c at test point j.
    """

    mean: np.ndarray
    cov: np.ndarray

    def pointwise(self):
        """Per-point C x C covariance blocks, shape (N*, C, C)."""
        n, C = self.mean.shape
        blocks = self.cov.reshape(C, n, C, n)
        idx = np.arange(n)
        return blocks[:, idx, :, idx]


def _cross(model, Xs):
    """Per-latent k_c(x*, X_c), each (N*, N)."""
    return [_gram(h, Xs[:, c], model.X[:, c]) for c, h in enumerate(model.hypers)]


def exact_posterior(model: AdditiveExactModel, Xs) -> ExactPosterior:
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    C = model.num_latents
    n = Xs.shape[0]
    Ks = _cross(model, Xs)
    mean = np.stack([k @ model.alpha for k in Ks], axis=1)
    W = [sla.solve_triangular(model.chol, k.T, lower=True) for k in Ks]
    cov = np.zeros((C * n, C * n))
    for c in range(C):
        for d in range(C):
            block = -W[c].T @ W[d]
            if c == d:
                block += _gram(model.hypers[c], Xs[:, c], Xs[:, c])
            cov[c * n : (c + 1) * n, d * n : (d + 1) * n] = block
    cov = 0.5 * (cov + cov.T)
    return ExactPosterior(mean, cov)


def exact_pointwise(model: AdditiveExactModel, Xs):
    """Posterior means (N*, C) and per-point C x C covariances (N*, C, C).

    Same numbers as ``exact_posterior(...).pointwise()`` without forming the
    full cross-covariance.
    """
    Xs = np.asarray(Xs, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    Ks = _cross(model, Xs)
    mean = np.stack([k @ model.alpha for k in Ks], axis=1)
    W = np.stack([sla.solve_triangular(model.chol, k.T, lower=True) for k in Ks], axis=0)
    cov = -np.einsum("cin,din->ncd", W, W)
    for c, h in enumerate(model.hypers):
        cov[:, c, c] += math.exp(float(h.log_variance))
    return mean, cov


class FitResult(NamedTuple):
    hypers: tuple
    noise_std: float
    log_evidence: float


def _pack(hypers, noise_std):
    theta = []
    for h in hypers:
        theta += [float(h.log_variance), float(h.log_lengthscale)]
    theta.append(math.log(noise_std))
    return np.array(theta)


def _unpack(theta):
    C = (len(theta) - 1) // 2
    hypers = tuple(SqExpHyper(np.float64(theta[2 * c]), np.float64(theta[2 * c + 1])) for c in range(C))
    return hypers, math.exp(theta[-1])


def _evidence_at(theta, X, y):
    try:
        hypers, noise = _unpack(theta)
        return exact_log_evidence(AdditiveExactModel.build(X, y, hypers, noise))
    except (np.linalg.LinAlgError, ValueError, OverflowError):
        return -np.inf


def fit_hyperparameters(
    X,
    y,
    init_hypers: Sequence[SqExpHyper],
    init_noise_std: float,
    restarts: int = 3,
    seed: int = 0,
    maxiter: int = 4000,
) -> FitResult:
    """Maximize the exact log evidence over log-parameters with Nelder-Mead.

    The first run starts at the given values; the rest start from
    log-space perturbations (std 0.3) of it. The best finite result wins,
    and it is never worse than the starting point.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    theta0 = _pack(init_hypers, init_noise_std)
    rng = np.random.default_rng(seed)
    best_theta, best_val = theta0, _evidence_at(theta0, X, y)

    def objective(theta):
        val = _evidence_at(theta, X, y)
        return -val if np.isfinite(val) else 1e300

    for r in range(restarts):
        start = theta0 if r == 0 else theta0 + 0.3 * rng.standard_normal(theta0.shape)
        res = sopt.minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"maxiter": maxiter, "maxfev": 2 * maxiter, "xatol": 1e-7, "fatol": 1e-9, "adaptive": True},
        )
        val = _evidence_at(res.x, X, y)
        logger.debug("restart %d: log evidence %.6f", r, val)
        if np.isfinite(val) and val > best_val:
            best_theta, best_val = res.x, val

    if not np.isfinite(best_val):
        raise OptimizationFailed("every restart produced a non-finite evidence")
    hypers, noise = _unpack(best_theta)
    return FitResult(hypers, noise, float(best_val))
