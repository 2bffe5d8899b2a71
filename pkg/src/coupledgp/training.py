"""The variational bound, its gradient, and stochastic optimization.

The bound is

    L(q) = (N / |B|) sum_{i in B} E_q[log p(y_i | F(x_i))] - KL[q(U) || p(U)]

for a minibatch B (the full data by default). Gradients come from JAX
reverse-mode differentiation of the same computation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .kernels import SqExpHyper
from .likelihoods import DensityNotFinite, Gaussian, Generic, NoiseStream, expected_loglik_batch
from .sparse import InducingSet, build_prior, project
from .variational import Posterior, colour, kl_to_prior, predictive_marginals, whiten

logger = logging.getLogger(__name__)

# Fixed stream for full-batch Monte Carlo evaluations during training.
EVAL_STEP = 2**31 - 1
_BATCH_TAG = 2**32 - 1


class Diverged(FloatingPointError):
    """The full-batch bound became non-finite during optimization."""

    def __init__(self, message, best_state=None, trace=None):
        super().__init__(message)
        self.best_state = best_state
        self.trace = trace


class Dataset(NamedTuple):
    """Covariates ``X`` (N, C), one column per latent, and targets ``y`` (N,)."""

    X: jnp.ndarray
    y: jnp.ndarray

    @classmethod
    def create(cls, X, y) -> "Dataset":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} covariate rows but {y.shape[0]} targets")
        if X.shape[0] == 0:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        return cls(jnp.asarray(X), jnp.asarray(y))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def num_latents(self) -> int:
        return int(self.X.shape[1])


class ModelState(NamedTuple):
    hypers: tuple
    inducing: InducingSet
    q: Posterior


@dataclass
class TrainConfig:
    iterations: int = 5000
    learning_rate: float = 1e-2
    final_learning_rate: float | None = None
    batch_size: int | None = None
    n_mc: int = 1
    seed: int = 0
    optimize_inducing: bool = True
    optimize_hypers: bool = False
    check_every: int = 100
    n_mc_eval: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # optimize in coordinates U = L_K v; the returned state is always direct
    whitened: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_mc < 1 or self.n_mc_eval < 1:
            raise ValueError("Monte Carlo sample counts must be >= 1")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")

    def validate_for(self, data: Dataset) -> None:
        if self.batch_size is not None and self.batch_size > data.n:
            raise ValueError(f"batch_size {self.batch_size} exceeds N={data.n}")


def _bound(state, X, y, spec, batch, n_mc, noise, closed_form, whitened=False):
    N = X.shape[0]
    prior = build_prior(state.inducing, state.hypers)
    if whitened:
        state = state._replace(q=colour(state.q, prior))
    proj = project(state.inducing, state.hypers, X[batch], prior)
    pred = predictive_marginals(state.q, proj)
    terms = expected_loglik_batch(y[batch], pred, spec, n_mc, noise, batch, closed_form)
    return (N / batch.shape[0]) * jnp.sum(terms) - kl_to_prior(state.q, prior)


_bound_jit = jax.jit(_bound, static_argnames=("n_mc", "closed_form", "whitened"))


def _as_batch(batch, n):
    if batch is None:
        return jnp.arange(n)
    batch = jnp.asarray(batch, dtype=int).reshape(-1)
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    return batch


def _explain_nonfinite(state, spec):
    # Re-run the eager checks so the caller sees the specific failure.
    build_prior(state.inducing, state.hypers)
    if isinstance(spec, Generic):
        raise DensityNotFinite("log-density is not finite at some sampled predictor value")


def elbo(
    state: ModelState,
    data: Dataset,
    spec,
    batch=None,
    n_mc: int = 1,
    noise: NoiseStream | None = None,
    closed_form: bool = True,
):
    """Evidence lower bound, rescaled by N/|batch| for minibatches.

    Deterministic for a Gaussian spec (closed form); otherwise a Monte
    Carlo estimate driven by ``noise``.
    """
    batch = _as_batch(batch, data.n)
    noise = NoiseStream() if noise is None else noise
    value = _bound_jit(state, data.X, data.y, spec, batch, n_mc, noise, closed_form)
    if not np.isfinite(float(value)):
        _explain_nonfinite(state, spec)
    return value


class ElboGradient(NamedTuple):
    """d bound / d parameters, shaped like the parameters; None when not requested."""

    q: Posterior
    inducing: InducingSet | None
    hypers: tuple | None
    likelihood: Gaussian | None


_bound_grad = jax.jit(jax.grad(_bound, argnums=(0, 3)), static_argnames=("n_mc", "closed_form", "whitened"))


def elbo_gradient(
    state: ModelState,
    data: Dataset,
    spec,
    batch=None,
    n_mc: int = 1,
    noise: NoiseStream | None = None,
    optimize_inducing: bool = True,
    optimize_hypers: bool = True,
    closed_form: bool = True,
) -> ElboGradient:
    """Gradient of ``elbo`` with respect to q, Z, log-hypers and log noise.

    The mean-field and coupled posteriors are both supported; the scale's
    upper triangle always receives zero gradient.
    """
    batch = _as_batch(batch, data.n)
    noise = NoiseStream() if noise is None else noise
    g_state, g_spec = _bound_grad(state, data.X, data.y, spec, batch, n_mc, noise, closed_form)
    return ElboGradient(
        q=g_state.q,
        inducing=g_state.inducing if optimize_inducing else None,
        hypers=g_state.hypers if optimize_hypers else None,
        likelihood=g_spec if (optimize_hypers and isinstance(spec, Gaussian)) else None,
    )


@dataclass
class TrainResult:
    state: ModelState
    spec: object
    best_elbo: float
    # rows of (iteration, full-batch bound, best bound so far)
    trace: list = field(default_factory=list)


def _evaluate(state, data, spec, config):
    closed = isinstance(spec, Gaussian)
    n = 1 if closed else config.n_mc_eval
    value = _bound_jit(
        state, data.X, data.y, spec, jnp.arange(data.n), n, NoiseStream(config.seed, EVAL_STEP), True, config.whitened
    )
    return float(value)


def optimize(state: ModelState, data: Dataset, spec, config: TrainConfig | None = None) -> TrainResult:
    """Adam ascent on the bound, keeping the best full-batch checkpoint.

    Every ``check_every`` iterations the full-batch bound (closed form for a
    Gaussian likelihood) is evaluated and the best state so far is retained.
    Kernel hyperparameters and the noise level are only moved when
    ``config.optimize_hypers`` is set; inducing locations only when
    ``config.optimize_inducing`` is set.
    """
    config = TrainConfig() if config is None else config
    config.validate_for(data)
    if data.num_latents != state.inducing.num_latents:
        raise ValueError("dataset and inducing set disagree on the number of latents")

    whitened = config.whitened
    original = state
    if whitened:
        state = state._replace(q=whiten(state.q, build_prior(state.inducing, state.hypers)))
    params = (state, spec)
    flat0, unravel = ravel_pytree(params)

    def fill(tree, on):
        return jax.tree_util.tree_map(lambda x: jnp.full(jnp.shape(x), float(on)), tree)

    mask_tree = (
        ModelState(
            hypers=fill(state.hypers, config.optimize_hypers),
            inducing=fill(state.inducing, config.optimize_inducing),
            q=fill(state.q, True),
        ),
        fill(spec, config.optimize_hypers),
    )
    mask, _ = ravel_pytree(mask_tree)

    X, y = data.X, data.y
    N = data.n
    b = N if config.batch_size is None else config.batch_size
    seed = config.seed
    lr0, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.eps
    lr_end = lr0 if config.final_learning_rate is None else config.final_learning_rate
    decay = math.log(lr_end / lr0) / max(config.iterations, 1)
    n_mc = config.n_mc

    def neg_bound(flat, step):
        st, sp = unravel(flat)
        if b == N:
            batch = jnp.arange(N)
        else:
            key = jax.random.fold_in(jax.random.fold_in(jax.random.PRNGKey(seed), step), _BATCH_TAG)
            batch = jax.random.permutation(key, N)[:b]
        return -_bound(st, X, y, sp, batch, n_mc, NoiseStream(seed, step), True, whitened)

    grad_fn = jax.grad(neg_bound)

    @jax.jit
    def run_chunk(flat, m, v, start, count):
        def body(j, carry):
            flat, m, v = carry
            t = start + j
            g = grad_fn(flat, t) * mask
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** (t + 1))
            vhat = v / (1.0 - b2 ** (t + 1))
            lr = lr0 * jnp.exp(decay * t)
            return flat - lr * mhat / (jnp.sqrt(vhat) + eps), m, v

        return jax.lax.fori_loop(0, count, body, (flat, m, v))

    def direct(st):
        if not whitened:
            return st
        return st._replace(q=colour(st.q, build_prior(st.inducing, st.hypers)))

    current = _evaluate(state, data, spec, config)
    if not math.isfinite(current):
        raise Diverged("initial bound is not finite", original, [])
    # checkpoints are kept in direct coordinates; the start is returned untouched
    best, best_params = current, (original, spec)
    trace = [(0, current, best)]

    flat, m, v = flat0, jnp.zeros_like(flat0), jnp.zeros_like(flat0)
    done = 0
    while done < config.iterations:
        count = min(config.check_every, config.iterations - done)
        flat, m, v = run_chunk(flat, m, v, done, count)
        done += count
        st, sp = unravel(flat)
        current = _evaluate(st, data, sp, config)
        if not math.isfinite(current):
            raise Diverged(f"bound became non-finite at iteration {done}", best_params[0], trace)
        if current > best:
            best, best_params = current, (direct(st), sp)
        trace.append((done, current, best))
        logger.debug("iteration %d: bound %.6f (best %.6f)", done, current, best)

    return TrainResult(state=best_params[0], spec=best_params[1], best_elbo=best, trace=trace)


def initial_state(
    data: Dataset,
    hypers: Sequence[SqExpHyper],
    num_inducing,
    coupled: bool = True,
) -> ModelState:
    """Grid inducing points and a posterior equal to the prior."""
    from .sparse import grid_inducing
    from .variational import init_coupled, init_meanfield

    inducing = grid_inducing(np.asarray(data.X), num_inducing)
    hypers = tuple(hypers)
    prior = build_prior(inducing, hypers)
    q = init_coupled(prior) if coupled else init_meanfield(prior)
    return ModelState(hypers, inducing, q)
