"""Sparse variational inference for models built from several coupled GPs.

A joint Gaussian over the inducing values of every latent function
(``CoupledGaussian``) is trained against the same bound as the usual
per-latent mean-field factorization (``MeanFieldGaussian``), and the
conjugate additive case is checked against closed-form answers in
:mod:`coupledgp.exact`.
"""

import jax

# Everything here is float64; set before any array is created.
jax.config.update("jax_enable_x64", True)

from .kernels import SqExpHyper, kernel_derivatives, kernel_eval, kernel_matrix  # noqa: E402
from .linalg import FactorizationFailed, jittered_cholesky, logdet_from_cholesky, tri_solve  # noqa: E402
from .sparse import (  # noqa: E402
    ConditionalProjection,
    InducingSet,
    PriorOverInducing,
    build_prior,
    grid_inducing,
    project,
)
from .variational import (  # noqa: E402
    CoupledGaussian,
    MarginalPredictive,
    MeanFieldGaussian,
    embed_meanfield,
    init_coupled,
    init_meanfield,
    kl_to_prior,
    predictive_marginal,
    predictive_marginals,
)
from .likelihoods import (  # noqa: E402
    DensityNotFinite,
    Gaussian,
    Generic,
    NoiseStream,
    expected_loglik_gaussian,
    expected_loglik_mc,
)
from .training import (  # noqa: E402
    Dataset,
    Diverged,
    ModelState,
    TrainConfig,
    elbo,
    elbo_gradient,
    optimize,
)
from .exact import (  # noqa: E402
    AdditiveExactModel,
    OptimizationFailed,
    exact_log_evidence,
    exact_posterior,
    fit_hyperparameters,
)

__version__ = "0.1.0"
