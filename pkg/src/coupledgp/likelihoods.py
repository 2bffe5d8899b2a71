"""Expected log-likelihood terms E_q[log p(y | Phi(F))].

Two likelihood specs are supported. ``Gaussian`` is y ~ N(w^T F, sigma^2)
and has a closed-form expectation. ``Generic`` takes any log-density and
combining function written with ``jax.numpy`` and is handled by
reparameterized Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .linalg import _concrete

LOG_2PI = math.log(2.0 * math.pi)
# Added to S before factorizing it for sampling; S may be only semidefinite.
SAMPLE_JITTER = 1e-10


class DensityNotFinite(FloatingPointError):
    """The log-density returned inf/nan for a sampled predictor value."""


class Gaussian(NamedTuple):
    """y ~ N(w^T F, sigma^2), with sigma kept in log-space."""

    log_noise_std: jnp.ndarray
    weights: jnp.ndarray

    @classmethod
    def create(cls, noise_std: float = 0.5, weights=(1.0, 1.0)) -> "Gaussian":
        if not (np.isfinite(noise_std) and noise_std > 0):
            raise ValueError(f"noise_std must be positive, got {noise_std}")
        w = np.asarray(weights, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("combination weights must be finite")
        return cls(jnp.asarray(np.log(noise_std)), jnp.asarray(w))

    @property
    def noise_std(self):
        return jnp.exp(self.log_noise_std)

    def combine(self, F):
        return F @ self.weights

    def log_density(self, y, rho):
        return -0.5 * LOG_2PI - self.log_noise_std - 0.5 * (y - rho) ** 2 * jnp.exp(-2.0 * self.log_noise_std)


@dataclass(frozen=True)
class Generic:
    """Arbitrary ``log_density(y, rho)`` with predictor ``rho = combine(F)``.

    Both callables must be traceable by JAX. The spec carries no array
    leaves, so jit treats the callables as static.
    """

    log_density: Callable
    combine: Callable


jax.tree_util.register_pytree_node(
    Generic,
    lambda g: ((), (g.log_density, g.combine)),
    lambda aux, _: Generic(*aux),
)


def expected_loglik_gaussian(y, m, S, w, noise_std):
    """Closed-form E[log N(y; w^T F, sigma^2)] for F ~ N(m, S).

    Batched over leading axes of ``y``, ``m`` (..., C) and ``S`` (..., C, C).
    """
    w = jnp.asarray(w, dtype=float)
    mu = jnp.asarray(m) @ w
    var = jnp.einsum("...ij,i,j->...", jnp.asarray(S), w, w)
    s2 = noise_std**2
    return -0.5 * LOG_2PI - 0.5 * jnp.log(s2) - ((y - mu) ** 2 + var) / (2.0 * s2)


class NoiseStream(NamedTuple):
    """Counter-based standard normals keyed by (seed, step, data index, sample index).

    Draws do not depend on evaluation order or on which other points share
    a minibatch.
    """

    seed: int | jnp.ndarray = 0
    step: int | jnp.ndarray = 0

    def normal(self, index, n_samples: int, dim: int):
        key = jax.random.fold_in(jax.random.PRNGKey(self.seed), self.step)
        key = jax.random.fold_in(key, index)
        keys = jax.vmap(lambda k: jax.random.fold_in(key, k))(jnp.arange(n_samples))
        return jax.vmap(lambda k: jax.random.normal(k, (dim,)))(keys)


def _mc_terms(y, m, S, spec, n_samples, noise, index):
    C = m.shape[-1]
    eps = noise.normal(index, n_samples, C)
    L = jnp.linalg.cholesky(S + SAMPLE_JITTER * jnp.eye(C))
    F = m + eps @ L.T
    rho = jax.vmap(spec.combine)(F)
    return jax.vmap(lambda r: spec.log_density(y, r))(rho)


def expected_loglik_mc(y, m, S, spec, n_samples: int = 1, noise: NoiseStream | None = None, index=0):
    """Monte Carlo estimate (1/n) sum_k log p(y | Phi(m + L_S eps_k)).

    ``L_S`` is the Cholesky factor of S + 1e-10 I. The estimate is a smooth
    function of (m, S) for a fixed noise draw, so it can be differentiated
    pathwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if noise is None:
        noise = NoiseStream()
    m = jnp.asarray(m, dtype=float)
    S = jnp.asarray(S, dtype=float)
    out = jnp.mean(_mc_terms(y, m, S, spec, n_samples, noise, index))
    if _concrete(out) and not np.isfinite(float(out)):
        raise DensityNotFinite("log-density is not finite at the sampled predictor values")
    return out


def mc_sample_terms(y, m, S, spec, n_samples: int, noise: NoiseStream, index=0):
    """The individual per-sample log-densities behind ``expected_loglik_mc``."""
    return _mc_terms(y, jnp.asarray(m, dtype=float), jnp.asarray(S, dtype=float), spec, n_samples, noise, index)


def expected_loglik_batch(y, pred, spec, n_samples: int, noise: NoiseStream, indices, closed_form: bool = True):
    """Per-point expected log-likelihoods for a batch of predictive marginals.

    A Gaussian spec uses the closed form unless ``closed_form`` is False.
    """
    if isinstance(spec, Gaussian) and closed_form:
        return expected_loglik_gaussian(y, pred.mean, pred.cov, spec.weights, spec.noise_std)
    per_point = jax.vmap(lambda yi, mi, Si, ii: jnp.mean(_mc_terms(yi, mi, Si, spec, n_samples, noise, ii)))
    return per_point(y, pred.mean, pred.cov, indices)
