"""Gaussian posteriors over the stacked inducing values U.

``CoupledGaussian`` is a single N(mu, L L^T) over all latents' inducing
values; ``MeanFieldGaussian`` holds one independent factor per latent.
Both store the scale's diagonal in log-space and its strict lower triangle
unconstrained (entries above the diagonal are ignored).
"""

from __future__ import annotations

from typing import NamedTuple, Union

import jax.numpy as jnp
import numpy as np

from .linalg import logdet_from_cholesky, tri_solve
from .sparse import ConditionalProjection, PriorOverInducing, _block_diag


class CoupledGaussian(NamedTuple):
    mean: jnp.ndarray
    scale_offdiag: jnp.ndarray
    scale_logdiag: jnp.ndarray

    @classmethod
    def from_scale(cls, mean, scale) -> "CoupledGaussian":
        scale = jnp.asarray(scale, dtype=float)
        diag = jnp.diagonal(scale)
        if bool(jnp.any(diag <= 0)):
            raise ValueError("scale diagonal must be strictly positive")
        return cls(jnp.asarray(mean, dtype=float), jnp.tril(scale, -1), jnp.log(diag))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def scale(self):
        return _scale(self.scale_offdiag, self.scale_logdiag)

    def covariance(self):
        L = self.scale()
        return L @ L.T


class MeanFieldGaussian(NamedTuple):
    """Independent N(mu_c, L_c L_c^T) per latent."""

    means: tuple
    scale_offdiags: tuple
    scale_logdiags: tuple

    @classmethod
    def from_scales(cls, means, scales) -> "MeanFieldGaussian":
        parts = [CoupledGaussian.from_scale(m, s) for m, s in zip(means, scales)]
        return cls(
            tuple(p.mean for p in parts),
            tuple(p.scale_offdiag for p in parts),
            tuple(p.scale_logdiag for p in parts),
        )

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(m.shape[0]) for m in self.means)

    @property
    def dim(self) -> int:
        return sum(self.sizes)

    def scales(self) -> list:
        return [_scale(o, d) for o, d in zip(self.scale_offdiags, self.scale_logdiags)]


Posterior = Union[CoupledGaussian, MeanFieldGaussian]


def _scale(offdiag, logdiag):
    return jnp.tril(offdiag, -1) + jnp.diag(jnp.exp(logdiag))


def init_coupled(prior: PriorOverInducing) -> CoupledGaussian:
    """Start at the prior: mu = 0 and L = prior Cholesky factor, so KL = 0."""
    L = prior.dense_factor()
    return CoupledGaussian(jnp.zeros(prior.dim), jnp.tril(L, -1), jnp.log(jnp.diagonal(L)))


def init_meanfield(prior: PriorOverInducing) -> MeanFieldGaussian:
    return MeanFieldGaussian(
        tuple(jnp.zeros(L.shape[0]) for L in prior.factors),
        tuple(jnp.tril(L, -1) for L in prior.factors),
        tuple(jnp.log(jnp.diagonal(L)) for L in prior.factors),
    )


def embed_meanfield(mf: MeanFieldGaussian) -> CoupledGaussian:
    """The same distribution written as a coupled posterior with block-diagonal scale."""
    return CoupledGaussian(
        jnp.concatenate(mf.means),
        _block_diag([jnp.tril(o, -1) for o in mf.scale_offdiags]),
        jnp.concatenate(mf.scale_logdiags),
    )


def colour(qw: Posterior, prior: PriorOverInducing) -> Posterior:
    """Map whitened coordinates (U = L_K v, v ~ qw) to the posterior over U.

    The result is the same Gaussian family; only the coordinates differ:
    mean = L_K m_v and scale = L_K L_v, still lower triangular.
    """
    if isinstance(qw, MeanFieldGaussian):
        means, offs, logs = [], [], []
        for m, Lv, Lp in zip(qw.means, qw.scales(), prior.factors):
            L = Lp @ Lv
            means.append(Lp @ m)
            offs.append(jnp.tril(L, -1))
            logs.append(jnp.log(jnp.diagonal(Lp)) + jnp.log(jnp.diagonal(Lv)))
        return MeanFieldGaussian(tuple(means), tuple(offs), tuple(logs))
    Lp = prior.dense_factor()
    L = Lp @ qw.scale()
    return CoupledGaussian(Lp @ qw.mean, jnp.tril(L, -1), jnp.log(jnp.diagonal(Lp)) + qw.scale_logdiag)


def whiten(q: Posterior, prior: PriorOverInducing) -> Posterior:
    """Inverse of ``colour``."""
    if isinstance(q, MeanFieldGaussian):
        means, offs, logs = [], [], []
        for m, L, Lp in zip(q.means, q.scales(), prior.factors):
            Lv = tri_solve(Lp, L)
            means.append(tri_solve(Lp, m))
            offs.append(jnp.tril(Lv, -1))
            logs.append(jnp.log(jnp.diagonal(L)) - jnp.log(jnp.diagonal(Lp)))
        return MeanFieldGaussian(tuple(means), tuple(offs), tuple(logs))
    Lp = prior.dense_factor()
    Lv = tri_solve(Lp, q.scale())
    return CoupledGaussian(
        tri_solve(Lp, q.mean), jnp.tril(Lv, -1), q.scale_logdiag - jnp.log(jnp.diagonal(Lp))
    )


def _offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def _gauss_kl(mean, L, Lp):
    """KL(N(mean, L L^T) || N(0, Lp Lp^T))."""
    B = tri_solve(Lp, L)
    a = tri_solve(Lp, mean)
    return 0.5 * (
        jnp.sum(B**2) + jnp.sum(a**2) - mean.shape[0] + logdet_from_cholesky(Lp) - logdet_from_cholesky(L)
    )


def kl_to_prior(q: Posterior, prior: PriorOverInducing):
    """KL[q(U) || p(U)] in closed form."""
    if isinstance(q, MeanFieldGaussian):
        if q.sizes != prior.sizes:
            raise ValueError(f"posterior blocks {q.sizes} do not match prior {prior.sizes}")
        return sum(_gauss_kl(m, L, Lp) for m, L, Lp in zip(q.means, q.scales(), prior.factors))

    if q.dim != prior.dim:
        raise ValueError(f"posterior dimension {q.dim} does not match prior {prior.dim}")
    L = q.scale()
    off = _offsets(prior.sizes)
    trace = 0.0
    maha = 0.0
    for c, Lp in enumerate(prior.factors):
        rows = slice(off[c], off[c + 1])
        trace = trace + jnp.sum(tri_solve(Lp, L[rows, :]) ** 2)
        maha = maha + jnp.sum(tri_solve(Lp, q.mean[rows]) ** 2)
    logdet_prior = sum(logdet_from_cholesky(Lp) for Lp in prior.factors)
    return 0.5 * (trace + maha - q.dim + logdet_prior - 2.0 * jnp.sum(q.scale_logdiag))


class MarginalPredictive(NamedTuple):
    """q(F(x_i)) = N(mean[i], cov[i]) for each of N points; mean (N, C), cov (N, C, C)."""

    mean: jnp.ndarray
    cov: jnp.ndarray


def predictive_marginals(q: Posterior, proj: ConditionalProjection) -> MarginalPredictive:
    """Joint C-dimensional marginal of the latents at every projected point."""
    A = proj.weights
    C = len(A)
    if isinstance(q, MeanFieldGaussian):
        means = [a @ m for a, m in zip(A, q.means)]
        var = [jnp.sum((a @ L) ** 2, axis=1) for a, L in zip(A, q.scales())]
        mean = jnp.stack(means, axis=1)
        cov = jnp.zeros((mean.shape[0], C, C), dtype=mean.dtype)
        idx = jnp.arange(C)
        cov = cov.at[:, idx, idx].set(jnp.stack(var, axis=1) + proj.residuals)
        return MarginalPredictive(mean, cov)

    off = _offsets([a.shape[1] for a in A])
    if off[-1] != q.dim:
        raise ValueError(f"projection dimension {off[-1]} does not match posterior {q.dim}")
    L = q.scale()
    # G[c] = A_c L_{c rows}: row i holds a_c(x_i)^T times that latent's rows of L
    G = [a @ L[off[c] : off[c + 1], :] for c, a in enumerate(A)]
    mean = jnp.stack([a @ q.mean[off[c] : off[c + 1]] for c, a in enumerate(A)], axis=1)
    Gs = jnp.stack(G, axis=1)  # (N, C, D)
    cov = jnp.einsum("ncd,ned->nce", Gs, Gs)
    idx = jnp.arange(C)
    cov = cov.at[:, idx, idx].add(proj.residuals)
    return MarginalPredictive(mean, cov)


def predictive_marginal(q: Posterior, proj: ConditionalProjection, i: int) -> MarginalPredictive:
    """Marginal at data index ``i``: mean (C,), cov (C, C)."""
    sub = ConditionalProjection(tuple(a[i : i + 1] for a in proj.weights), proj.residuals[i : i + 1])
    pm = predictive_marginals(q, sub)
    return MarginalPredictive(pm.mean[0], pm.cov[0])
