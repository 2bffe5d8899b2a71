import jax
import jax.numpy as jnp
import numpy as np
import pytest

from coupledgp.kernels import SqExpHyper, kernel_eval
from coupledgp.sparse import InducingSet, build_prior, grid_inducing, project

from conftest import assert_grad_close, central_diff

H1 = SqExpHyper.create(1.0, 1.0)


def test_prior_single_point():
    prior = build_prior(InducingSet.create([[0.0]]), [H1])
    np.testing.assert_allclose(prior.grams[0], [[1.0]])
    assert prior.dim == 1


def test_prior_block_diagonal():
    prior = build_prior(InducingSet.create([[0.0], [0.5]]), [H1, SqExpHyper.create(2.0, 1.0)])
    K = np.asarray(prior.dense_covariance())
    assert K.shape == (2, 2)
    assert K[0, 1] == 0.0 and K[1, 0] == 0.0
    assert K[1, 1] == pytest.approx(2.0, rel=1e-5)


def test_prior_gram_example():
    prior = build_prior(InducingSet.create([[0.0, 1.1774100]]), [H1])
    np.testing.assert_allclose(prior.grams[0], [[1.0, 0.5], [0.5, 1.0]], atol=1e-7)


def test_inducing_validation():
    with pytest.raises(ValueError):
        InducingSet.create([[0.0, 0.0]])
    with pytest.raises(ValueError):
        InducingSet.create([[]])
    with pytest.raises(ValueError):
        InducingSet.create([[0.0, np.nan]])


def test_grid_inducing():
    X = np.array([[-1.0, 0.0], [2.0, 4.0], [0.5, 1.0]])
    ind = grid_inducing(X, [4, 1])
    np.testing.assert_allclose(ind.locations[0], np.linspace(-1, 2, 4))
    np.testing.assert_allclose(ind.locations[1], [2.0])
    with pytest.raises(ValueError):
        grid_inducing(X, 0)


def test_interpolation_exact_at_inducing_points():
    Z = np.array([-1.0, 0.0, 0.7, 2.0])
    h = SqExpHyper.create(2.0, 0.8)
    proj = project(InducingSet.create([Z]), [h], Z[:, None])
    np.testing.assert_allclose(proj.weights[0], np.eye(4), atol=1e-4)
    assert np.all(np.asarray(proj.residuals) <= 1e-5 * 2.0)
    U = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_allclose(proj.weights[0] @ U, U, atol=1e-4)


def test_far_field():
    h = SqExpHyper.create(3.0, 0.5)
    proj = project(InducingSet.create([[0.0, 0.3]]), [h], jnp.array([[6.0], [-10.0]]))
    assert float(jnp.max(jnp.abs(proj.weights[0]))) <= 1e-5
    assert np.all(np.asarray(proj.residuals) >= 0.999 * 3.0)


def test_single_inducing_point_formula(rng):
    h = SqExpHyper.create(1.7, 0.9)
    x = rng.normal(size=6)
    proj = project(InducingSet.create([[0.0]]), [h], x[:, None])
    k0 = 1.7 * (1 + 1e-6)  # jittered K_ZZ
    kx = np.array([float(kernel_eval(h, xi, 0.0)) for xi in x])
    np.testing.assert_allclose(proj.weights[0][:, 0], kx / k0, rtol=1e-12)
    np.testing.assert_allclose(proj.residuals[:, 0], 1.7 - kx**2 / k0, rtol=1e-10, atol=1e-12)


def test_residuals_shrink_under_refinement(rng):
    h = SqExpHyper.create(1.0, 0.7)
    for _ in range(10):
        Z = np.sort(rng.uniform(-2, 2, 4))
        extra = rng.uniform(-2, 2)
        x = rng.uniform(-3, 3, (20, 1))
        r_small = project(InducingSet.create([Z]), [h], x).residuals
        r_big = project(InducingSet.create([np.append(Z, extra)]), [h], x).residuals
        assert np.all(np.asarray(r_big) <= np.asarray(r_small) + 1e-5)


def test_projection_differentiable(rng):
    x = rng.uniform(-2, 2, (7, 2))
    R1, R2 = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    R3 = rng.normal(size=(7, 2))

    def functional(theta):
        Z1, Z2 = theta[0:3], theta[3:5]
        hs = [SqExpHyper(theta[5], theta[6]), SqExpHyper(theta[7], theta[8])]
        p = project(InducingSet((Z1, Z2)), hs, x)
        return jnp.sum(p.weights[0] * R1) + jnp.sum(p.weights[1] * R2) + jnp.sum(p.residuals * R3)

    theta = jnp.array([-1.0, 0.1, 1.2, -0.5, 0.8, 0.2, -0.3, -0.1, 0.2])
    g = jax.grad(functional)(theta)
    num = central_diff(lambda t: float(functional(jnp.asarray(t))), np.asarray(theta))
    assert_grad_close(g, num, rtol=1e-4, atol=1e-7)
