"""Jittered Cholesky and triangular solves.

Every quadratic form and log-determinant in the package goes through a
lower Cholesky factor; nothing forms an explicit inverse.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.linalg import solve_triangular

JITTER_START = 1e-6
JITTER_GROWTH = 10.0
JITTER_CAP = 1e-2


class FactorizationFailed(np.linalg.LinAlgError):
    """Raised when a Gram matrix needs more jitter than the cap allows.

    In practice this means duplicated or nearly coincident inducing points.
    """


def _concrete(*xs) -> bool:
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


def _jitter_level(K, scale):
    """Smallest level 1e-6 * 10^k (relative to ``scale``) at which K factorizes."""
    K = lax.stop_gradient(K)
    scale = lax.stop_gradient(scale)
    eye = jnp.eye(K.shape[-1], dtype=K.dtype)

    def cond(level):
        L = jnp.linalg.cholesky(K + level * scale * eye)
        return (level <= JITTER_CAP * (1 + 1e-9)) & ~jnp.all(jnp.isfinite(L))

    return lax.while_loop(cond, lambda level: level * JITTER_GROWTH, jnp.asarray(JITTER_START, dtype=K.dtype))


def jittered_cholesky(K, scale=1.0):
    """Lower factor L with L L^T = K + eps I, plus the jitter eps used.

    eps starts at 1e-6 * scale and grows tenfold until the factorization
    succeeds. Past 1e-2 * scale, eager calls raise ``FactorizationFailed``;
    traced calls (inside jit/grad) return a NaN factor instead, which the
    training loop reports as divergence.

    The level (the power of ten) is piecewise constant and carries no
    gradient; eps = level * scale is differentiated through ``scale``.
    """
    K = jnp.asarray(K, dtype=float)
    scale = jnp.asarray(scale, dtype=K.dtype)
    if _concrete(K):
        asym = float(jnp.max(jnp.abs(K - K.T)))
        if asym > 1e-10 * max(float(jnp.max(jnp.abs(K))), 1e-300):
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    level = _jitter_level(K, scale)
    failed = level > JITTER_CAP * (1 + 1e-9)
    if _concrete(level) and bool(failed):
        raise FactorizationFailed(
            f"Cholesky failed with jitter up to {JITTER_CAP:g} x scale; "
            "check for duplicate inducing points"
        )
    jitter = level * scale
    L = jnp.linalg.cholesky(K + jitter * jnp.eye(K.shape[-1], dtype=K.dtype))
    L = jnp.where(failed, jnp.nan, L)
    return L, jitter


def tri_solve(L, B, transposed: bool = False):
    """Solve L X = B, or L^T X = B when ``transposed``."""
    return solve_triangular(L, B, lower=True, trans=1 if transposed else 0)


def logdet_from_cholesky(L):
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(L)))
