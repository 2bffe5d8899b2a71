"""Squared-exponential kernel, Gram matrices and their derivatives.

Inputs are scalar per latent. Hyperparameters live in log-space so that
optimizers can move them freely.
"""

from __future__ import annotations

from typing import NamedTuple

import jax.numpy as jnp
import numpy as np


class SqExpHyper(NamedTuple):
    """Hyperparameters of k(x, x') = s^2 exp(-(x - x')^2 / (2 l^2))."""

    log_variance: jnp.ndarray
    log_lengthscale: jnp.ndarray

    @classmethod
    def create(cls, variance: float = 1.0, lengthscale: float = 1.0) -> "SqExpHyper":
        if not (np.isfinite(variance) and variance > 0):
            raise ValueError(f"variance must be positive, got {variance}")
        if not (np.isfinite(lengthscale) and lengthscale > 0):
            raise ValueError(f"lengthscale must be positive, got {lengthscale}")
        return cls(jnp.asarray(np.log(variance)), jnp.asarray(np.log(lengthscale)))

    @property
    def variance(self):
        return jnp.exp(self.log_variance)

    @property
    def lengthscale(self):
        return jnp.exp(self.log_lengthscale)


def _scaled_sqdist(h: SqExpHyper, X, X2):
    X = jnp.atleast_1d(jnp.asarray(X, dtype=float))
    X2 = jnp.atleast_1d(jnp.asarray(X2, dtype=float))
    diff = X[:, None] - X2[None, :]
    return diff, diff**2 * jnp.exp(-2.0 * h.log_lengthscale)


def kernel_eval(h: SqExpHyper, x, x2):
    """Scalar kernel value k(x, x2)."""
    d = (jnp.asarray(x, dtype=float) - jnp.asarray(x2, dtype=float)) / h.lengthscale
    return h.variance * jnp.exp(-0.5 * d**2)


def kernel_matrix(h: SqExpHyper, X, X2=None):
    """Gram matrix with entries k(X[i], X2[j]); ``X2`` defaults to ``X``."""
    if X2 is None:
        X2 = X
    _, r2 = _scaled_sqdist(h, X, X2)
    return h.variance * jnp.exp(-0.5 * r2)


class KernelGradients(NamedTuple):
    """Elementwise derivatives of K = kernel_matrix(h, X, X2).

    ``x1[i, j]`` is dK[i, j]/dX[i] and ``x2[i, j]`` is dK[i, j]/dX2[j]; all
    other input derivatives of K[i, j] vanish.
    """

    log_variance: jnp.ndarray
    log_lengthscale: jnp.ndarray
    x1: jnp.ndarray
    x2: jnp.ndarray


def kernel_derivatives(h: SqExpHyper, X, X2=None) -> KernelGradients:
    if X2 is None:
        X2 = X
    diff, r2 = _scaled_sqdist(h, X, X2)
    K = h.variance * jnp.exp(-0.5 * r2)
    dx1 = -K * diff * jnp.exp(-2.0 * h.log_lengthscale)
    return KernelGradients(
        log_variance=K,
        log_lengthscale=K * r2,
        x1=dx1,
        x2=-dx1,
    )
