"""Inducing points, the prior over inducing values, and conditional projections.

For latent c with inducing locations Z_c, the prior conditional
p(f_c(x) | U_c) has mean A_c(x) U_c and variance r_c(x), with
A_c = K_xZ K_ZZ^{-1} and r_c = k(x, x) - A_c K_Zx.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import jax.numpy as jnp
import numpy as np

from .kernels import SqExpHyper, kernel_matrix
from .linalg import _concrete, jittered_cholesky, tri_solve


class InducingSet(NamedTuple):
    """Per-latent inducing locations; ``locations[c]`` has shape (M_c,)."""

    locations: tuple

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(z.shape[0]) for z in self.locations)

    @property
    def dim(self) -> int:
        return sum(self.sizes)

    @property
    def num_latents(self) -> int:
        return len(self.locations)

    @classmethod
    def create(cls, locations: Sequence) -> "InducingSet":
        inducing = cls(tuple(jnp.asarray(z, dtype=float).reshape(-1) for z in locations))
        validate_inducing(inducing)
        return inducing


def validate_inducing(inducing: InducingSet) -> None:
    """Reject empty, non-finite or (near-)duplicate locations."""
    if not inducing.locations:
        raise ValueError("need at least one latent")
    for c, z in enumerate(inducing.locations):
        z = np.asarray(z)
        if z.size < 1:
            raise ValueError(f"latent {c}: need at least one inducing point")
        if not np.all(np.isfinite(z)):
            raise ValueError(f"latent {c}: inducing locations must be finite")
        if z.size > 1:
            zs = np.sort(z)
            span = zs[-1] - zs[0]
            if np.min(np.diff(zs)) <= 1e-8 * span:
                raise ValueError(f"latent {c}: inducing locations must be distinct")


def grid_inducing(X, num: int | Sequence[int]) -> InducingSet:
    """Uniform grid over [min, max] of each latent's covariate column."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    C = X.shape[1]
    sizes = [num] * C if np.isscalar(num) else list(num)
    if len(sizes) != C:
        raise ValueError("one inducing count per latent is required")
    locs = []
    for c, m in enumerate(sizes):
        m = int(m)
        if m < 1:
            raise ValueError(f"latent {c}: inducing count must be >= 1, got {m}")
        lo, hi = X[:, c].min(), X[:, c].max()
        locs.append(np.array([0.5 * (lo + hi)]) if m == 1 else np.linspace(lo, hi, m))
    return InducingSet.create(locs)


class PriorOverInducing(NamedTuple):
    """p(U) = N(0, blockdiag(K_{Z_c Z_c})), one Gram block and factor per latent."""

    grams: tuple
    factors: tuple
    jitters: tuple

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(K.shape[0]) for K in self.grams)

    @property
    def dim(self) -> int:
        return sum(self.sizes)

    def dense_covariance(self):
        """Block-diagonal prior covariance including jitter."""
        blocks = [L @ L.T for L in self.factors]
        return _block_diag(blocks)

    def dense_factor(self):
        return _block_diag(list(self.factors))


def _block_diag(blocks):
    D = sum(b.shape[0] for b in blocks)
    out = jnp.zeros((D, D), dtype=blocks[0].dtype)
    i = 0
    for b in blocks:
        m = b.shape[0]
        out = out.at[i : i + m, i : i + m].set(b)
        i += m
    return out


def build_prior(inducing: InducingSet, hypers: Sequence[SqExpHyper]) -> PriorOverInducing:
    if len(hypers) != inducing.num_latents:
        raise ValueError("one hyperparameter set per latent is required")
    grams, factors, jitters = [], [], []
    for z, h in zip(inducing.locations, hypers):
        K = kernel_matrix(h, z, z)
        L, jit = jittered_cholesky(K, h.variance)
        grams.append(K)
        factors.append(L)
        jitters.append(jit)
    return PriorOverInducing(tuple(grams), tuple(factors), tuple(jitters))


class ConditionalProjection(NamedTuple):
    """Projection rows ``weights[c]`` (N, M_c) and residual variances (N, C)."""

    weights: tuple
    residuals: jnp.ndarray


# Residuals below this (relative to the kernel variance) before clamping
# point at a bug rather than rounding.
RESIDUAL_FLOOR = -1e-8


def project(
    inducing: InducingSet,
    hypers: Sequence[SqExpHyper],
    X,
    prior: PriorOverInducing | None = None,
) -> ConditionalProjection:
    """Evaluate A_c and r_c at the rows of ``X`` (shape (N, C))."""
    X = jnp.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if prior is None:
        prior = build_prior(inducing, hypers)
    weights, residuals = [], []
    for c, (z, h, L) in enumerate(zip(inducing.locations, hypers, prior.factors)):
        Kzx = kernel_matrix(h, z, X[:, c])
        V = tri_solve(L, Kzx)
        A = tri_solve(L, V, transposed=True).T
        raw = h.variance - jnp.sum(V**2, axis=0)
        if _concrete(raw) and raw.size and float(jnp.min(raw)) < RESIDUAL_FLOOR * float(h.variance):
            raise FloatingPointError(
                f"latent {c}: conditional variance {float(jnp.min(raw)):.3g} is negative"
            )
        weights.append(A)
        residuals.append(jnp.maximum(raw, 0.0))
    return ConditionalProjection(tuple(weights), jnp.stack(residuals, axis=1))
